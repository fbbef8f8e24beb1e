#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cgt/datasets.hpp"
#include "cgt/model.hpp"
#include "cgt/objectives.hpp"

namespace cgt {

// Flat dotted-key configuration ("model.dim_x=112"), one pair per line,
// '#' comments. Typed getters record which keys were consumed so a run can
// reject configs containing unknown keys by name.
class KvConfig {
public:
    static KvConfig from_text(const std::string& text);
    static KvConfig from_file(const std::string& path);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& def) const;
    int get_int(const std::string& key, int def) const;
    int64_t get_i64(const std::string& key, int64_t def) const;
    uint64_t get_u64(const std::string& key, uint64_t def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;

    // Keys present in the store but never consumed by a getter.
    std::vector<std::string> unused_keys() const;
    void require_all_consumed() const;  // throws naming the first unknown key

private:
    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> seen_;
};

enum class DatasetKind { icl, linreg, text };

struct OptimizerConfig {
    double lr = 2.5e-4;
    int warmup = 500;
    int total_steps = 20000;
    int batch = 16;
    double weight_decay = 0.0;
};

// Everything a reproducible run needs. Default-constructed values are the
// arithmetic in-context-learning setup at desk scale.
struct RunConfig {
    RunConfig();

    ModelConfig model;
    LossConfig loss;
    bool use_vae = false;
    VaeObjective vae;

    DatasetKind dataset = DatasetKind::icl;
    SyntheticTaskSpec icl;
    LinearRegSpec linreg;
    TextMixSpec text;

    OptimizerConfig opt;
    uint64_t seed = 1;
    std::string output_dir = "runs/latest";
    int eval_every = 1000;
    int eval_sequences = 64;
    int checkpoint_every = 1000;
};

// Consumes keys from kv; an unconsumed (unknown) key is an error naming it.
RunConfig parse_run_config(const KvConfig& kv);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& c);

// The model block alone, as used inside checkpoint headers.
std::string serialize_model_config(const ModelConfig& m);
ModelConfig parse_model_config(const KvConfig& kv);

}  // namespace cgt
