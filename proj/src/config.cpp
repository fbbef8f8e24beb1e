#include "cgt/config.hpp"

#include <fstream>
#include <sstream>

namespace cgt {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& val, const char* want) {
    throw ShapeError("config key '" + key + "': cannot parse '" + val + "' as " + want);
}

std::string mixing_str(MixNonlin m) {
    return m == MixNonlin::tanh_mode ? "tanh" : "softmax";
}
MixNonlin parse_mixing(const std::string& key, const std::string& v) {
    if (v == "tanh") return MixNonlin::tanh_mode;
    if (v == "softmax") return MixNonlin::softmax_mode;
    bad_value(key, v, "tanh|softmax");
}

std::string input_mode_str(InputMode m) {
    return m == InputMode::token ? "token" : "continuous";
}
InputMode parse_input_mode(const std::string& key, const std::string& v) {
    if (v == "token") return InputMode::token;
    if (v == "continuous") return InputMode::continuous;
    bad_value(key, v, "token|continuous");
}

std::string zeta_str(ZetaProfile z) {
    switch (z) {
        case ZetaProfile::constant: return "constant";
        case ZetaProfile::linear: return "linear";
        case ZetaProfile::quadratic: return "quadratic";
        case ZetaProfile::last_k: return "last_k";
    }
    return "constant";
}
ZetaProfile parse_zeta(const std::string& key, const std::string& v) {
    if (v == "constant") return ZetaProfile::constant;
    if (v == "linear") return ZetaProfile::linear;
    if (v == "quadratic") return ZetaProfile::quadratic;
    if (v == "last_k") return ZetaProfile::last_k;
    bad_value(key, v, "constant|linear|quadratic|last_k");
}

std::string kernel_str(KernelSpec::Kind k) {
    return k == KernelSpec::Kind::RbfMix ? "rbf_mix" : "fewshot";
}
KernelSpec::Kind parse_kernel(const std::string& key, const std::string& v) {
    if (v == "rbf_mix") return KernelSpec::Kind::RbfMix;
    if (v == "fewshot") return KernelSpec::Kind::Fewshot;
    bad_value(key, v, "rbf_mix|fewshot");
}

std::string dataset_str(DatasetKind d) {
    switch (d) {
        case DatasetKind::icl: return "icl";
        case DatasetKind::linreg: return "linreg";
        case DatasetKind::text: return "text";
    }
    return "icl";
}
DatasetKind parse_dataset(const std::string& key, const std::string& v) {
    if (v == "icl") return DatasetKind::icl;
    if (v == "linreg") return DatasetKind::linreg;
    if (v == "text") return DatasetKind::text;
    bad_value(key, v, "icl|linreg|text");
}

std::vector<std::string> split_paths(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ';'))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

std::string join_paths(const std::vector<std::string>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + v[i];
    return out;
}

void emit(std::ostringstream& out, const std::string& key, const std::string& v) {
    out << key << "=" << v << "\n";
}
void emit(std::ostringstream& out, const std::string& key, int v) {
    out << key << "=" << v << "\n";
}
void emit(std::ostringstream& out, const std::string& key, uint64_t v) {
    out << key << "=" << v << "\n";
}
void emit(std::ostringstream& out, const std::string& key, bool v) {
    out << key << "=" << (v ? "true" : "false") << "\n";
}
void emit(std::ostringstream& out, const std::string& key, double v) {
    std::ostringstream num;
    num.precision(17);
    num << v;
    out << key << "=" << num.str() << "\n";
}

}  // namespace

KvConfig KvConfig::from_text(const std::string& text) {
    KvConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ShapeError("config line " + std::to_string(lineno) +
                             ": expected key=value, got '" + t + "'");
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

KvConfig KvConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ShapeError("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
}

void KvConfig::set(const std::string& key, const std::string& value) {
    kv_[key] = value;
}

std::string KvConfig::get_str(const std::string& key, const std::string& def) const {
    seen_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
}

int KvConfig::get_int(const std::string& key, int def) const {
    const int64_t v = get_i64(key, def);
    if (v < INT32_MIN || v > INT32_MAX) bad_value(key, std::to_string(v), "32-bit integer");
    return int(v);
}

int64_t KvConfig::get_i64(const std::string& key, int64_t def) const {
    seen_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) bad_value(key, it->second, "integer");
        return v;
    } catch (const ShapeError&) {
        throw;
    } catch (...) {
        bad_value(key, it->second, "integer");
    }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t def) const {
    seen_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(it->second, &pos);
        if (pos != it->second.size()) bad_value(key, it->second, "unsigned integer");
        return v;
    } catch (const ShapeError&) {
        throw;
    } catch (...) {
        bad_value(key, it->second, "unsigned integer");
    }
}

double KvConfig::get_double(const std::string& key, double def) const {
    seen_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    try {
        size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) bad_value(key, it->second, "number");
        return v;
    } catch (const ShapeError&) {
        throw;
    } catch (...) {
        bad_value(key, it->second, "number");
    }
}

bool KvConfig::get_bool(const std::string& key, bool def) const {
    seen_.insert(key);
    auto it = kv_.find(key);
    if (it == kv_.end()) return def;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "boolean");
}

std::vector<std::string> KvConfig::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_)
        if (!seen_.count(k)) out.push_back(k);
    return out;
}

void KvConfig::require_all_consumed() const {
    const auto unused = unused_keys();
    if (!unused.empty()) throw ShapeError("unknown config key: " + unused.front());
}

RunConfig::RunConfig() {
    model.n_layers = 6;
    model.readout_layer = 4;
    model.dim_x = 112;
    model.dim_y = 64;
    model.heads_x = 7;
    model.heads_y = 4;
    model.mlp_mult = 4;
    model.rank = 4;
    model.n_templates = 16;
    model.vocab_size = icl_vocab::kSize;
    model.max_seq_len = 128;
}

ModelConfig parse_model_config(const KvConfig& kv) {
    RunConfig def;
    ModelConfig m = def.model;
    m.n_layers = kv.get_int("model.n_layers", m.n_layers);
    m.readout_layer = kv.get_int("model.readout_layer", m.readout_layer);
    m.dim_x = kv.get_int("model.dim_x", m.dim_x);
    m.dim_y = kv.get_int("model.dim_y", m.dim_y);
    m.heads_x = kv.get_int("model.heads_x", m.heads_x);
    m.heads_y = kv.get_int("model.heads_y", m.heads_y);
    m.mlp_mult = kv.get_int("model.mlp_mult", m.mlp_mult);
    m.rank = kv.get_int("model.rank", m.rank);
    m.n_templates = kv.get_int("model.n_templates", m.n_templates);
    m.mixing = parse_mixing("model.mixing", kv.get_str("model.mixing", mixing_str(m.mixing)));
    m.vocab_size = kv.get_int("model.vocab_size", m.vocab_size);
    m.max_seq_len = kv.get_int("model.max_seq_len", m.max_seq_len);
    m.input_mode = parse_input_mode("model.input_mode",
                                    kv.get_str("model.input_mode", input_mode_str(m.input_mode)));
    m.d_in = kv.get_int("model.d_in", m.d_in);
    m.d_out = kv.get_int("model.d_out", m.d_out);
    m.vae_mode = kv.get_bool("model.vae", m.vae_mode);
    return m;
}

std::string serialize_model_config(const ModelConfig& m) {
    std::ostringstream out;
    emit(out, "model.n_layers", m.n_layers);
    emit(out, "model.readout_layer", m.readout_layer);
    emit(out, "model.dim_x", m.dim_x);
    emit(out, "model.dim_y", m.dim_y);
    emit(out, "model.heads_x", m.heads_x);
    emit(out, "model.heads_y", m.heads_y);
    emit(out, "model.mlp_mult", m.mlp_mult);
    emit(out, "model.rank", m.rank);
    emit(out, "model.n_templates", m.n_templates);
    emit(out, "model.mixing", mixing_str(m.mixing));
    emit(out, "model.vocab_size", m.vocab_size);
    emit(out, "model.max_seq_len", m.max_seq_len);
    emit(out, "model.input_mode", input_mode_str(m.input_mode));
    emit(out, "model.d_in", m.d_in);
    emit(out, "model.d_out", m.d_out);
    emit(out, "model.vae", m.vae_mode);
    return out.str();
}

RunConfig parse_run_config(const KvConfig& kv) {
    RunConfig c;
    c.model = parse_model_config(kv);

    c.loss.eta = kv.get_double("loss.eta", c.loss.eta);
    c.loss.w_c = kv.get_double("loss.w_c", c.loss.w_c);
    c.loss.w_d = kv.get_double("loss.w_d", c.loss.w_d);
    c.loss.horizon = kv.get_int("loss.horizon", c.loss.horizon);
    c.loss.zeta = parse_zeta("loss.zeta", kv.get_str("loss.zeta", zeta_str(c.loss.zeta)));
    c.loss.zeta_last_k = kv.get_int("loss.zeta_last_k", c.loss.zeta_last_k);
    c.loss.aux_samples = kv.get_int("loss.aux_samples", c.loss.aux_samples);
    c.loss.rebase_positions = kv.get_bool("loss.rebase_positions", c.loss.rebase_positions);

    c.use_vae = kv.get_bool("vae.enabled", c.use_vae);
    c.vae.beta_y = kv.get_double("vae.beta", c.vae.beta_y);
    c.vae.kernel.kind =
        parse_kernel("vae.kernel", kv.get_str("vae.kernel", kernel_str(c.vae.kernel.kind)));
    c.vae.kernel.nu = kv.get_double("vae.nu", c.vae.kernel.nu);
    c.vae.kernel.lambda_frac = kv.get_double("vae.lambda_frac", c.vae.kernel.lambda_frac);
    c.vae.kernel.eps = kv.get_double("vae.eps", c.vae.kernel.eps);

    c.dataset = parse_dataset("data.kind", kv.get_str("data.kind", dataset_str(c.dataset)));
    c.icl.n_tasks = kv.get_int("data.n_tasks", c.icl.n_tasks);
    c.icl.n_ex = kv.get_int("data.n_ex", c.icl.n_ex);
    c.icl.d = kv.get_int("data.digits", c.icl.d);
    c.linreg.d_in = kv.get_int("data.d_in", c.linreg.d_in);
    c.linreg.d_out = kv.get_int("data.d_out", c.linreg.d_out);
    c.linreg.n_pairs = kv.get_int("data.n_pairs", c.linreg.n_pairs);
    c.linreg.eps = kv.get_double("data.eps", c.linreg.eps);
    c.text.corpus_paths = split_paths(kv.get_str("data.corpus", join_paths(c.text.corpus_paths)));
    c.text.l_max = kv.get_int("data.l_max", c.text.l_max);
    c.text.l_start = kv.get_int("data.l_start", c.text.l_start);
    c.text.l_finish = kv.get_int("data.l_finish", c.text.l_finish);
    c.text.n_excerpts = kv.get_int("data.n_excerpts", c.text.n_excerpts);

    c.opt.lr = kv.get_double("opt.lr", c.opt.lr);
    c.opt.warmup = kv.get_int("opt.warmup", c.opt.warmup);
    c.opt.total_steps = kv.get_int("opt.steps", c.opt.total_steps);
    c.opt.batch = kv.get_int("opt.batch", c.opt.batch);
    c.opt.weight_decay = kv.get_double("opt.weight_decay", c.opt.weight_decay);

    c.seed = kv.get_u64("run.seed", c.seed);
    c.output_dir = kv.get_str("run.dir", c.output_dir);
    c.eval_every = kv.get_int("train.eval_every", c.eval_every);
    c.eval_sequences = kv.get_int("train.eval_sequences", c.eval_sequences);
    c.checkpoint_every = kv.get_int("train.checkpoint_every", c.checkpoint_every);

    kv.require_all_consumed();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    return parse_run_config(KvConfig::from_file(path));
}

std::string serialize_run_config(const RunConfig& c) {
    std::ostringstream out;
    out << serialize_model_config(c.model);
    emit(out, "loss.eta", c.loss.eta);
    emit(out, "loss.w_c", c.loss.w_c);
    emit(out, "loss.w_d", c.loss.w_d);
    emit(out, "loss.horizon", c.loss.horizon);
    emit(out, "loss.zeta", zeta_str(c.loss.zeta));
    emit(out, "loss.zeta_last_k", c.loss.zeta_last_k);
    emit(out, "loss.aux_samples", c.loss.aux_samples);
    emit(out, "loss.rebase_positions", c.loss.rebase_positions);
    emit(out, "vae.enabled", c.use_vae);
    emit(out, "vae.beta", c.vae.beta_y);
    emit(out, "vae.kernel", kernel_str(c.vae.kernel.kind));
    emit(out, "vae.nu", c.vae.kernel.nu);
    emit(out, "vae.lambda_frac", c.vae.kernel.lambda_frac);
    emit(out, "vae.eps", c.vae.kernel.eps);
    emit(out, "data.kind", dataset_str(c.dataset));
    emit(out, "data.n_tasks", c.icl.n_tasks);
    emit(out, "data.n_ex", c.icl.n_ex);
    emit(out, "data.digits", c.icl.d);
    emit(out, "data.d_in", c.linreg.d_in);
    emit(out, "data.d_out", c.linreg.d_out);
    emit(out, "data.n_pairs", c.linreg.n_pairs);
    emit(out, "data.eps", c.linreg.eps);
    emit(out, "data.corpus", join_paths(c.text.corpus_paths));
    emit(out, "data.l_max", c.text.l_max);
    emit(out, "data.l_start", c.text.l_start);
    emit(out, "data.l_finish", c.text.l_finish);
    emit(out, "data.n_excerpts", c.text.n_excerpts);
    emit(out, "opt.lr", c.opt.lr);
    emit(out, "opt.warmup", c.opt.warmup);
    emit(out, "opt.steps", c.opt.total_steps);
    emit(out, "opt.batch", c.opt.batch);
    emit(out, "opt.weight_decay", c.opt.weight_decay);
    emit(out, "run.seed", c.seed);
    emit(out, "run.dir", c.output_dir);
    emit(out, "train.eval_every", c.eval_every);
    emit(out, "train.eval_sequences", c.eval_sequences);
    emit(out, "train.checkpoint_every", c.checkpoint_every);
    return out.str();
}

}  // namespace cgt
