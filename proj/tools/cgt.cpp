#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgt/analysis.hpp"
#include "cgt/checkpoint.hpp"
#include "cgt/config.hpp"
#include "cgt/datasets.hpp"
#include "cgt/kernels.hpp"
#include "cgt/model.hpp"
#include "cgt/protocol.hpp"
#include "cgt/specialize.hpp"
#include "cgt/train.hpp"

namespace fs = std::filesystem;
using namespace cgt;

namespace {

// Key of the trainer's fixed evaluation stream; reusing it makes `cgt eval`
// score the same sequences the trainer's eval.csv reports.
constexpr uint64_t kEvalDataKey = 4;

RunConfig read_config(const std::string& path, const std::vector<std::string>& sets) {
    KvConfig kv = KvConfig::from_file(path);
    for (const auto& pair : sets) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::runtime_error("--set expects key=value, got '" + pair + "'");
        kv.set(pair.substr(0, eq), pair.substr(eq + 1));
    }
    return parse_run_config(kv);
}

void require_compatible(const ModelConfig& m, const RunConfig& cfg) {
    switch (cfg.dataset) {
        case DatasetKind::icl:
            if (m.input_mode != InputMode::token || m.vocab_size != icl_vocab::kSize)
                throw std::runtime_error("icl data needs a token model with vocab_size=16");
            if (cfg.icl.n_tasks * icl_task_len(cfg.icl) > m.max_seq_len)
                throw std::runtime_error("icl sequence does not fit max_seq_len");
            break;
        case DatasetKind::linreg:
            if (m.input_mode != InputMode::continuous || m.d_in != cfg.linreg.d_in ||
                m.d_out != cfg.linreg.d_out)
                throw std::runtime_error("linreg data needs a continuous model with matching d_in/d_out");
            if (2 * cfg.linreg.n_pairs > m.max_seq_len)
                throw std::runtime_error("linreg sequence does not fit max_seq_len");
            break;
        case DatasetKind::text:
            if (m.input_mode != InputMode::token || m.vocab_size != byte_vocab::kSize)
                throw std::runtime_error("text data needs a token model with vocab_size=256");
            break;
    }
}

std::ofstream open_csv(const fs::path& path, const std::string& header) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(12);
    out << header << "\n";
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------ eval modes

enum class EvalMode { dynamic, frozen, folded, moving_average };

struct ModeSpec {
    EvalMode mode = EvalMode::dynamic;
    int s = 0;  // 0: derive from segment metadata
    double gamma = 1.0;
    std::string text = "dynamic";
};

ModeSpec parse_mode(const std::string& raw) {
    ModeSpec m;
    m.text = raw;
    std::string head = raw, arg;
    if (const auto at = raw.find('@'); at != std::string::npos) {
        head = raw.substr(0, at);
        arg = raw.substr(at + 1);
    }
    const auto position = [&] {
        if (arg.empty()) return 0;
        size_t used = 0;
        const int v = std::stoi(arg, &used);
        if (used != arg.size() || v < 1)
            throw std::runtime_error("bad position in mode '" + raw + "'");
        return v;
    };
    if (head == "dynamic" && arg.empty()) {
        m.mode = EvalMode::dynamic;
    } else if (head == "frozen") {
        m.mode = EvalMode::frozen;
        m.s = position();
    } else if (head == "folded") {
        m.mode = EvalMode::folded;
        m.s = position();
    } else if (head == "moving-average" && !arg.empty()) {
        m.mode = EvalMode::moving_average;
        size_t used = 0;
        m.gamma = std::stod(arg, &used);
        if (used != arg.size() || m.gamma <= 0.0 || m.gamma > 1.0)
            throw std::runtime_error("moving-average needs @gamma in (0,1]");
    } else {
        throw std::runtime_error("unknown mode '" + raw +
                                 "' (dynamic, frozen[@s], folded[@s], moving-average@gamma)");
    }
    return m;
}

struct SeqRun {
    std::vector<float> logits;  // [n, out_width]
    std::vector<double> trace;  // [n, dim_y]
};

template <class Batch>
SeqRun run_one(const Model<float>& m, const Batch& b, const ModeSpec& mode, int s,
               const std::vector<float>* stored, const Model<float>* prefolded) {
    Graph<float> g;
    ForwardResult<float> r;
    std::unique_ptr<Model<float>> own;
    switch (mode.mode) {
        case EvalMode::dynamic:
            r = forward(g, m, b, {});
            break;
        case EvalMode::frozen:
            r = frozen_forward(g, m, b, stored ? *stored : capture_context(m, b, s));
            break;
        case EvalMode::folded: {
            const Model<float>* run = prefolded;
            if (!run) {
                own = fold(m, capture_context(m, b, s)).model;
                run = own.get();
            }
            r = forward(g, *run, b, {});
            break;
        }
        case EvalMode::moving_average:
            r = moving_average_run(g, m, b, mode.gamma);
            break;
    }
    SeqRun out;
    out.logits.assign(r.logits->val.begin(), r.logits->val.end());
    // frozen runs carry a single broadcast context row; tile it to [n, dy]
    const auto& y = r.y_read->val;
    const size_t dy = size_t(m.config().dim_y);
    if (y.size() == dy && b.seq > 1) {
        out.trace.reserve(size_t(b.seq) * dy);
        for (int t = 0; t < b.seq; ++t) out.trace.insert(out.trace.end(), y.begin(), y.end());
    } else {
        out.trace.assign(y.begin(), y.end());
    }
    return out;
}

void add_ce(const SeqRun& run, const std::vector<int>& tokens, int vocab, double& sum,
            size_t& terms) {
    for (size_t t = 0; t + 1 < tokens.size(); ++t) {
        const float* row = run.logits.data() + t * size_t(vocab);
        float mx = row[0];
        for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        double z = 0;
        for (int v = 0; v < vocab; ++v) z += std::exp(double(row[v]) - mx);
        sum += -(double(row[tokens[t + 1]]) - mx - std::log(z));
        ++terms;
    }
}

// The stored context of a specialized checkpoint replaces capture; without
// one the y pathway was dropped, so only context-driven modes make sense.
const std::vector<float>* stored_context(const LoadedModel<float>& loaded,
                                         const ModeSpec& mode) {
    if (!loaded.meta.specialized) return nullptr;
    if (loaded.context.empty()) {
        if (mode.mode != EvalMode::dynamic)
            throw std::runtime_error(
                "specialized checkpoint lacks a stored context; run --mode dynamic");
        return nullptr;
    }
    if (mode.mode == EvalMode::dynamic || mode.mode == EvalMode::moving_average)
        throw std::runtime_error(
            "specialized checkpoint: use --mode frozen or folded (its stored context)");
    return &loaded.context;
}

// ------------------------------------------------------------ train

int run_train(const std::string& config_path, const std::vector<std::string>& sets,
              bool seed_given, uint64_t seed, const std::string& out_dir) {
    RunConfig cfg = read_config(config_path, sets);
    if (seed_given) cfg.seed = seed;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    std::cout << "training into " << cfg.output_dir << " (seed " << cfg.seed << ", "
              << cfg.opt.total_steps << " steps)\n";
    const TrainStats st = train_run(cfg);
    if (st.nan_abort) {
        std::cerr << "cgt: non-finite loss at step " << st.steps_done + 1
                  << "; aborted, last checkpoint: " << st.last_checkpoint << "\n";
        return 1;
    }
    std::cout << "done: " << st.steps_done << " steps, final loss " << st.final_loss << "\n"
              << "final checkpoint: " << st.final_checkpoint << "\n"
              << "best checkpoint:  " << st.best_checkpoint << "\n";
    return 0;
}

// ------------------------------------------------------------ eval

int run_eval(const std::string& ckpt_path, const std::string& config_path,
             const std::vector<std::string>& sets, const std::string& mode_raw,
             bool seed_given, uint64_t seed, int sequences, std::string out_dir) {
    RunConfig cfg = read_config(config_path, sets);
    if (seed_given) cfg.seed = seed;
    auto loaded = load_checkpoint<float>(ckpt_path);
    const Model<float>& m = *loaded.model;
    require_compatible(m.config(), cfg);

    ModeSpec mode = parse_mode(mode_raw);
    const std::vector<float>* stored = stored_context(loaded, mode);
    if (sequences <= 0) sequences = cfg.eval_sequences;
    if (out_dir.empty())
        out_dir = (fs::path(ckpt_path).parent_path() / "eval").string();
    const std::string run = fs::path(ckpt_path).stem().string();
    Rng data_rng = Rng(cfg.seed).fork(kEvalDataKey);
    const int dy = m.config().dim_y;

    std::unique_ptr<Model<float>> prefolded;
    if (mode.mode == EvalMode::folded && stored) prefolded = fold(m, *stored).model;

    auto metrics = open_csv(fs::path(out_dir) / "metrics.csv", "run,mode,metric,value");
    const auto metric = [&](const std::string& name, double v) {
        metrics << run << ',' << mode.text << ',' << name << ',' << v << "\n";
    };

    if (cfg.dataset == DatasetKind::linreg) {
        if (loaded.meta.specialized)
            throw std::runtime_error("linreg eval compares fresh captures; use a full checkpoint");
        if (mode.mode == EvalMode::folded)
            throw std::runtime_error("folded eval is wired for token data; frozen is equivalent");
        std::vector<LinRegSequence> seqs;
        for (int i = 0; i < sequences; ++i)
            seqs.push_back(gen_linreg_sequence(cfg.linreg, m.config().d_in, data_rng));
        if (mode.mode == EvalMode::frozen) {
            int fp = cfg.linreg.n_pairs / 2;
            if (mode.s) {
                if (mode.s % 2) throw std::runtime_error("frozen@s on linreg needs an even s");
                fp = mode.s / 2;
            }
            const LinregReport rep = linreg_specialized_error(m, cfg.linreg, seqs, fp);
            metric("freeze_pairs", fp);
            metric("model_mse", rep.model_mse);
            metric("ridge_mse", rep.ridge_mse);
            metric("n_terms", rep.n_terms);
            std::cout << "frozen@" << 2 * fp << ": model mse " << rep.model_mse << ", ridge mse "
                      << rep.ridge_mse << "\n";
        } else {
            const int d_out = m.config().d_out;
            double se = 0;
            size_t terms = 0;
            for (const auto& seq : seqs) {
                const auto vb = pack_linreg<float>({seq}, 0, 1);
                const SeqRun r = run_one(m, vb.in, mode, 0, nullptr, nullptr);
                for (int k = 0; k < seq.n_pairs; ++k) {
                    double e2 = 0;
                    for (int j = 0; j < d_out; ++j) {
                        const double d = double(r.logits[size_t(2 * k) * d_out + j]) -
                                         seq.targets[size_t(k) * d_out + j];
                        e2 += d * d;
                    }
                    se += e2;
                    ++terms;
                }
            }
            metric("model_mse_all_pairs", se / double(terms));
            std::cout << mode.text << ": mse over all pairs " << se / double(terms) << "\n";
        }
        std::cout << "wrote " << (fs::path(out_dir) / "metrics.csv").string() << "\n";
        return 0;
    }

    // token datasets
    std::vector<std::vector<int>> token_seqs;
    std::vector<IclSequence> icl_seqs;
    if (cfg.dataset == DatasetKind::icl) {
        for (int i = 0; i < sequences; ++i) {
            icl_seqs.push_back(gen_icl_sequence(cfg.icl, data_rng));
            token_seqs.push_back(icl_seqs.back().tokens);
        }
    } else {
        for (int i = 0; i < sequences; ++i) {
            auto mix = gen_text_mixture(cfg.text, data_rng);
            if (int(mix.tokens.size()) > m.config().max_seq_len)
                mix.tokens.resize(size_t(m.config().max_seq_len));
            token_seqs.push_back(std::move(mix.tokens));
        }
    }

    int s = mode.s;
    if ((mode.mode == EvalMode::frozen || mode.mode == EvalMode::folded) && s == 0 && !stored) {
        if (cfg.dataset != DatasetKind::icl)
            throw std::runtime_error("mode '" + mode.text +
                                     "' needs @position: this dataset has no segment metadata");
        s = icl_seqs.front().tasks.front().e1_end;
        mode.text = (mode.mode == EvalMode::frozen ? "frozen@" : "folded@") + std::to_string(s);
    }

    const int vocab = m.config().vocab_size;
    AccuracyReport a_e1, a_e2, a_all;
    std::vector<double> variation;
    double ce_sum = 0;
    size_t ce_terms = 0;
    std::vector<std::string> var_scope;
    for (size_t i = 0; i < token_seqs.size(); ++i) {
        TokenBatch b;
        b.batch = 1;
        b.seq = int(token_seqs[i].size());
        b.ids = token_seqs[i];
        const SeqRun r = run_one(m, b, mode, s, stored, prefolded.get());
        add_ce(r, token_seqs[i], vocab, ce_sum, ce_terms);
        if (cfg.dataset != DatasetKind::icl) continue;
        const IclSequence& seq = icl_seqs[i];
        a_e1.merge(score_answers(r.logits.data(), b.seq, vocab, b.ids.data(),
                                 answer_spans(seq, Segment::e1)));
        a_e2.merge(score_answers(r.logits.data(), b.seq, vocab, b.ids.data(),
                                 answer_spans(seq, Segment::e2)));
        a_all.merge(score_answers(r.logits.data(), b.seq, vocab, b.ids.data(),
                                  answer_spans(seq, Segment::all)));
        for (size_t j = 0; j < seq.tasks.size(); ++j) {
            const IclTask& t = seq.tasks[j];
            variation.push_back(representation_variation(r.trace, dy, {t.e1_begin, t.e1_end},
                                                         {t.e2_begin, t.e2_end}));
            var_scope.push_back("seq" + std::to_string(i) + ".task" + std::to_string(j));
        }
    }
    metric("ce", ce_sum / double(ce_terms));

    if (cfg.dataset == DatasetKind::icl) {
        auto acc = open_csv(fs::path(out_dir) / "accuracy.csv", "run,segment,mode,value,stderr,n");
        const auto put = [&](const char* seg, const AccuracyReport& r) {
            const double p = r.fraction();
            const double serr = r.n_answers ? std::sqrt(p * (1 - p) / r.n_answers) : 0.0;
            acc << run << ',' << seg << ',' << mode.text << ',' << p << ',' << serr << ','
                << r.n_answers << "\n";
        };
        put("e1", a_e1);
        put("e2", a_e2);
        put("all", a_all);
        metric("token_accuracy_all", a_all.token_fraction());

        auto var = open_csv(fs::path(out_dir) / "variation.csv", "run,mode,scope,value,sigma3");
        for (size_t i = 0; i < variation.size(); ++i)
            var << run << ',' << mode.text << ',' << var_scope[i] << ',' << variation[i] << ",\n";
        const VariationReport rep = summarize_variation(variation);
        var << run << ',' << mode.text << ",mean," << rep.mean << ',' << rep.sigma3 << "\n";
        std::cout << mode.text << ": e2 accuracy " << a_e2.fraction() << " (" << a_e2.n_answers
                  << " answers), variation " << rep.mean << "\n";
    } else {
        std::cout << mode.text << ": ce " << ce_sum / double(ce_terms) << "\n";
    }
    std::cout << "wrote CSVs into " << out_dir << "\n";
    return 0;
}

// ------------------------------------------------------------ specialize

int run_specialize(const std::string& ckpt_path, const std::string& prefix_path, int freeze_at,
                   bool do_fold, std::string out_path) {
    auto loaded = load_checkpoint<float>(ckpt_path);
    if (loaded.meta.specialized)
        throw std::runtime_error("checkpoint is already specialized");
    const Model<float>& m = *loaded.model;
    if (out_path.empty()) {
        fs::path p(ckpt_path);
        out_path = (p.parent_path() / (p.stem().string() + "_spec.ckpt")).string();
    }

    std::vector<float> ctx;
    std::string prefix_fnv;
    int prefix_len = 0;
    if (m.config().input_mode == InputMode::token) {
        std::string text = read_file(prefix_path);
        if (m.config().vocab_size == icl_vocab::kSize) {
            std::erase_if(text, [](char c) { return c == '\n' || c == '\r' || c == ' '; });
        }
        const std::vector<int> ids = m.config().vocab_size == icl_vocab::kSize
                                         ? icl_vocab::tokenize(text)
                                         : byte_vocab::tokenize(text);
        prefix_len = int(ids.size());
        if (prefix_len == 0) throw std::runtime_error("prefix file holds no tokens");
        if (freeze_at == 0) freeze_at = std::min(prefix_len, m.config().max_seq_len);
        if (freeze_at < 1 || freeze_at > prefix_len)
            throw std::runtime_error("--freeze-at " + std::to_string(freeze_at) +
                                     " outside prefix length " + std::to_string(prefix_len));
        TokenBatch b;
        b.batch = 1;
        b.seq = std::min(prefix_len, m.config().max_seq_len);
        if (freeze_at > b.seq)
            throw std::runtime_error("--freeze-at beyond the model window");
        b.ids.assign(ids.begin(), ids.begin() + b.seq);
        ctx = capture_context(m, b, freeze_at);
        prefix_fnv = fnv1a_hex(ids.data(), ids.size() * sizeof(int));
    } else {
        // comma-separated floats, one row per position
        std::ifstream in(prefix_path);
        if (!in) throw std::runtime_error("cannot open " + prefix_path);
        std::vector<float> vals;
        int width = -1;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string cell;
            int cols = 0;
            while (std::getline(ss, cell, ',')) {
                vals.push_back(std::stof(cell));
                ++cols;
            }
            if (width == -1) width = cols;
            if (cols != width) throw std::runtime_error("ragged prefix row in " + prefix_path);
        }
        if (vals.empty()) throw std::runtime_error("prefix file holds no rows");
        VecBatch<float> b;
        b.batch = 1;
        b.width = width;
        b.seq = int(vals.size()) / width;
        b.vals = vals;
        prefix_len = b.seq;
        if (freeze_at == 0) freeze_at = prefix_len;
        if (freeze_at < 1 || freeze_at > prefix_len)
            throw std::runtime_error("--freeze-at " + std::to_string(freeze_at) +
                                     " outside prefix length " + std::to_string(prefix_len));
        ctx = capture_context(m, b, freeze_at);
        prefix_fnv = fnv1a_hex(vals.data(), vals.size() * sizeof(float));
    }

    std::string prov = "specialize from=" + fs::path(ckpt_path).filename().string() +
                       " freeze_at=" + std::to_string(freeze_at) +
                       " fold=" + (do_fold ? "1" : "0") + " prefix_fnv=" + prefix_fnv;
    if (!loaded.meta.provenance.empty()) prov += " <- " + loaded.meta.provenance;

    if (do_fold) {
        const Specialized<float> sp = fold(m, ctx);
        save_checkpoint(out_path, *sp.model, true, prov, &sp.context);
    } else {
        save_checkpoint(out_path, m, true, prov, &ctx);
    }
    std::cout << "specialized at position " << freeze_at << (do_fold ? " (folded)" : "") << "\n"
              << "source " << fs::file_size(ckpt_path) << " bytes -> " << out_path << " "
              << fs::file_size(out_path) << " bytes\n"
              << "provenance: " << prov << "\n";
    return 0;
}

// ------------------------------------------------------------ probe

int run_probe(const std::string& ckpt_path, const std::string& config_path,
              const std::vector<std::string>& sets, bool seed_given, uint64_t seed,
              int sequences, std::string out_dir) {
    RunConfig cfg = read_config(config_path, sets);
    if (seed_given) cfg.seed = seed;
    auto loaded = load_checkpoint<float>(ckpt_path);
    if (loaded.meta.specialized)
        throw std::runtime_error("probe reads the dynamic context; use a full checkpoint");
    const Model<float>& m = *loaded.model;
    require_compatible(m.config(), cfg);
    if (cfg.dataset != DatasetKind::icl)
        throw std::runtime_error("probe targets (a, b) multipliers; use an icl dataset");
    if (sequences <= 0) sequences = cfg.eval_sequences;
    if (out_dir.empty()) out_dir = (fs::path(ckpt_path).parent_path() / "eval").string();

    Rng root(cfg.seed);
    Rng train_rng = root.fork(11), eval_rng = root.fork(12), shuffle_rng = root.fork(13);
    std::vector<IclSequence> train_seqs, eval_seqs;
    for (int i = 0; i < 4 * sequences; ++i) train_seqs.push_back(gen_icl_sequence(cfg.icl, train_rng));
    for (int i = 0; i < sequences; ++i) eval_seqs.push_back(gen_icl_sequence(cfg.icl, eval_rng));

    const ProbeData tr = icl_probe_data(m, train_seqs);
    const ProbeData ev = icl_probe_data(m, eval_seqs);
    const int dy = m.config().dim_y;
    const ProbeResult res = linear_probe(tr.y, tr.t, ev.y, ev.t, dy, 2);

    // shuffled-target baseline: same rows, targets decoupled from contexts
    std::vector<double> t_shuf = tr.t;
    for (int i = tr.rows - 1; i > 0; --i) {
        const int j = int(shuffle_rng.below(uint64_t(i) + 1));
        std::swap(t_shuf[size_t(i) * 2], t_shuf[size_t(j) * 2]);
        std::swap(t_shuf[size_t(i) * 2 + 1], t_shuf[size_t(j) * 2 + 1]);
    }
    const ProbeResult base = linear_probe(tr.y, t_shuf, ev.y, ev.t, dy, 2);

    const std::string run = fs::path(ckpt_path).stem().string();
    auto csv = open_csv(fs::path(out_dir) / "probe.csv",
                        "run,target,rows_train,rows_eval,mae,mae_shuffled,underdetermined");
    const char* names[2] = {"a", "b"};
    for (int t = 0; t < 2; ++t)
        csv << run << ',' << names[t] << ',' << tr.rows << ',' << ev.rows << ','
            << res.mae_per_target[size_t(t)] << ',' << base.mae_per_target[size_t(t)] << ','
            << (res.underdetermined ? 1 : 0) << "\n";
    csv << run << ",all," << tr.rows << ',' << ev.rows << ',' << res.mae << ',' << base.mae
        << ',' << (res.underdetermined ? 1 : 0) << "\n";
    std::cout << "probe mae " << res.mae << " (shuffled-target baseline " << base.mae << ", "
              << tr.rows << " train rows)\n"
              << "wrote " << (fs::path(out_dir) / "probe.csv").string() << "\n";
    return 0;
}

// ------------------------------------------------------------ dump

template <class Batch>
std::vector<double> trace_of(const Model<float>& m, const Batch& b) {
    Graph<float> g;
    const auto r = forward(g, m, b, {});
    return std::vector<double>(r.y_read->val.begin(), r.y_read->val.end());
}

int run_dump(const std::string& ckpt_path, const std::string& config_path,
             const std::vector<std::string>& sets, bool seed_given, uint64_t seed, int sequences,
             std::string out_dir) {
    RunConfig cfg = read_config(config_path, sets);
    if (seed_given) cfg.seed = seed;
    auto loaded = load_checkpoint<float>(ckpt_path);
    if (loaded.meta.specialized)
        throw std::runtime_error("dump reads the dynamic context; use a full checkpoint");
    const Model<float>& m = *loaded.model;
    require_compatible(m.config(), cfg);
    if (sequences <= 0) sequences = 4;
    if (out_dir.empty()) out_dir = (fs::path(ckpt_path).parent_path() / "eval").string();
    fs::create_directories(out_dir);

    Rng data_rng = Rng(cfg.seed).fork(kEvalDataKey);
    const int dy = m.config().dim_y;
    std::vector<DocEmbedding> docs;

    if (cfg.dataset == DatasetKind::icl) {
        for (int i = 0; i < sequences; ++i) {
            const IclSequence seq = gen_icl_sequence(cfg.icl, data_rng);
            TokenBatch b;
            b.batch = 1;
            b.seq = int(seq.tokens.size());
            b.ids = seq.tokens;
            const auto trace = trace_of(m, b);
            write_csv_matrix((fs::path(out_dir) / ("dotmat_seq" + std::to_string(i) + ".csv")).string(),
                             dot_product_matrix(trace, b.seq, dy), b.seq);
            std::ostringstream label;
            label.precision(4);
            for (size_t j = 0; j < seq.tasks.size(); ++j)
                label << (j ? "|" : "") << seq.tasks[j].a << '*' << seq.tasks[j].b;
            docs.push_back(embed_document(m, seq.tokens, "seq" + std::to_string(i), label.str()));
        }
    } else if (cfg.dataset == DatasetKind::text) {
        for (int i = 0; i < sequences; ++i) {
            auto mix = gen_text_mixture(cfg.text, data_rng);
            if (int(mix.tokens.size()) > m.config().max_seq_len)
                mix.tokens.resize(size_t(m.config().max_seq_len));
            TokenBatch b;
            b.batch = 1;
            b.seq = int(mix.tokens.size());
            b.ids = mix.tokens;
            const auto trace = trace_of(m, b);
            write_csv_matrix((fs::path(out_dir) / ("dotmat_seq" + std::to_string(i) + ".csv")).string(),
                             dot_product_matrix(trace, b.seq, dy), b.seq);
        }
        for (const auto& path : cfg.text.corpus_paths)
            docs.push_back(embed_document(m, byte_vocab::tokenize(read_file(path)),
                                          fs::path(path).stem().string(), "corpus"));
    } else {
        for (int i = 0; i < sequences; ++i) {
            const auto seq = gen_linreg_sequence(cfg.linreg, m.config().d_in, data_rng);
            const auto vb = pack_linreg<float>({seq}, 0, 1);
            const auto trace = trace_of(m, vb.in);
            write_csv_matrix((fs::path(out_dir) / ("dotmat_seq" + std::to_string(i) + ".csv")).string(),
                             dot_product_matrix(trace, vb.in.seq, dy), vb.in.seq);
        }
    }
    if (!docs.empty())
        write_embeddings_csv((fs::path(out_dir) / "embeddings.csv").string(), docs);
    std::cout << "wrote " << sequences << " dot-product matrices";
    if (!docs.empty()) std::cout << " and " << docs.size() << " document embeddings";
    std::cout << " into " << out_dir << "\n";
    return 0;
}

// ------------------------------------------------------------ gen-data

int run_gendata(const std::string& config_path, const std::vector<std::string>& sets,
                bool seed_given, uint64_t seed, int count, std::string out_path) {
    RunConfig cfg = read_config(config_path, sets);
    if (seed_given) cfg.seed = seed;
    Rng rng(cfg.seed);
    if (count <= 0) count = 16;

    if (cfg.dataset == DatasetKind::icl) {
        if (out_path.empty()) out_path = "icl_samples.txt";
        std::ofstream out(out_path);
        if (!out) throw std::runtime_error("cannot write " + out_path);
        for (int i = 0; i < count; ++i)
            out << icl_vocab::detokenize(gen_icl_sequence(cfg.icl, rng).tokens) << "\n";
    } else if (cfg.dataset == DatasetKind::linreg) {
        if (out_path.empty()) out_path = "linreg_samples.csv";
        const int width = std::max(cfg.linreg.d_in, cfg.linreg.d_out);
        std::string header = "seq,row,role";
        for (int c = 0; c < width; ++c) header += ",c" + std::to_string(c);
        auto out = open_csv(out_path, header);
        for (int i = 0; i < count; ++i) {
            const auto seq = gen_linreg_sequence(cfg.linreg, width, rng);
            for (int r = 0; r < 2 * seq.n_pairs; ++r) {
                out << i << ',' << r << ',' << (r % 2 ? "y" : "x");
                for (int c = 0; c < width; ++c)
                    out << ',' << seq.inputs[size_t(r) * width + c];
                out << "\n";
            }
        }
    } else {
        if (out_path.empty()) out_path = "text_samples.txt";
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + out_path);
        for (int i = 0; i < count; ++i) {
            if (i) out << "\n====\n";
            out << byte_vocab::detokenize(gen_text_mixture(cfg.text, rng).tokens);
        }
    }
    std::cout << "wrote " << count << " samples to " << out_path << "\n";
    return 0;
}

// ------------------------------------------------------------ oracle

int run_oracle(uint64_t seed) {
    bool ok = true;
    const auto report = [&](const std::string& name, bool pass, const std::string& detail) {
        std::cout << (pass ? "PASS " : "FAIL ") << name << " (" << detail << ")\n";
        ok &= pass;
    };

    {
        Rng rng(seed);
        const int n = 32;
        const double eps = 0.5;
        const McCovariance mc = mc_covariance_oracle(eps, n, 100000, rng);
        double worst = 0;
        for (int s = 1; s <= n; ++s)
            for (int t = 1; t <= n; ++t) {
                const size_t i = size_t(s - 1) * n + size_t(t - 1);
                worst = std::max(worst, std::abs(mc.cov[i] - fewshot_entry(s, t, eps)) / mc.se[i]);
            }
        std::ostringstream d;
        d << "worst |z| " << worst << " over " << n * n << " entries";
        report("fewshot kernel vs running-mean Monte Carlo", worst < 3.0, d.str());
    }

    {
        ModelConfig c;
        c.n_layers = 3;
        c.readout_layer = 1;
        c.dim_x = 16;
        c.dim_y = 8;
        c.heads_x = 2;
        c.heads_y = 2;
        c.mlp_mult = 2;
        c.rank = 2;
        c.n_templates = 4;
        c.vocab_size = 16;
        c.max_seq_len = 24;
        Rng rng = Rng(seed).fork(2);
        double worst = 0;
        for (int trial = 0; trial < 5; ++trial) {
            Model<float> m(c);
            m.init_weights(rng);
            for (int pair = 0; pair < 10; ++pair) {
                std::vector<float> ctx(size_t(c.dim_y));
                for (auto& v : ctx) v = float(rng.normal() * 0.5);
                TokenBatch b;
                b.batch = 1;
                b.seq = 12;
                for (int t = 0; t < b.seq; ++t) b.ids.push_back(int(rng.below(16)));
                Graph<float> gf, gd;
                const auto frozen = frozen_forward(gf, m, b, ctx);
                const auto sp = fold(m, ctx);
                const auto folded = forward(gd, *sp.model, b, {});
                for (size_t i = 0; i < frozen.logits->val.size(); ++i)
                    worst = std::max(worst, std::abs(double(frozen.logits->val[i]) -
                                                     double(folded.logits->val[i])));
            }
        }
        std::ostringstream d;
        d << "max |frozen - folded| " << worst << " over 5 models x 10 contexts";
        report("fold equivalence (float32)", worst < 1e-5, d.str());

        Rng rng64 = Rng(seed).fork(3);
        double worst64 = 0;
        for (int trial = 0; trial < 3; ++trial) {
            Model<double> m(c);
            m.init_weights(rng64);
            for (int pair = 0; pair < 5; ++pair) {
                std::vector<double> ctx(size_t(c.dim_y));
                for (auto& v : ctx) v = rng64.normal() * 0.5;
                TokenBatch b;
                b.batch = 1;
                b.seq = 12;
                for (int t = 0; t < b.seq; ++t) b.ids.push_back(int(rng64.below(16)));
                Graph<double> gf, gd;
                const auto frozen = frozen_forward(gf, m, b, ctx);
                const auto sp = fold(m, ctx);
                const auto folded = forward(gd, *sp.model, b, {});
                for (size_t i = 0; i < frozen.logits->val.size(); ++i)
                    worst64 = std::max(worst64,
                                       std::abs(frozen.logits->val[i] - folded.logits->val[i]));
            }
        }
        std::ostringstream d64;
        d64 << "max |frozen - folded| " << worst64 << " over 3 models x 5 contexts";
        report("fold equivalence (float64)", worst64 < 1e-10, d64.str());
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* th = std::getenv("CGT_THREADS"); th && std::string(th) != "1")
        std::cerr << "cgt: single-threaded build, CGT_THREADS ignored\n";

    CLI::App app{"contextually guided transformer toolkit"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, prefix_path, out, mode = "dynamic";
    std::vector<std::string> sets;
    uint64_t seed = 0;
    int sequences = 0, count = 0, freeze_at = 0;
    bool do_fold = false;

    auto* train = app.add_subcommand("train", "train a model from a run config");
    train->add_option("config", config_path, "run config file")->required()->check(CLI::ExistingFile);
    train->add_option("--set", sets, "override a config key, key=value");
    train->add_option("--seed", seed, "override run.seed");
    train->add_option("--out", out, "override run.dir");

    auto* eval = app.add_subcommand("eval", "score a checkpoint on generated data");
    eval->add_option("checkpoint", ckpt_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--config", config_path, "dataset config")->required()->check(CLI::ExistingFile);
    eval->add_option("--set", sets, "override a config key, key=value");
    eval->add_option("--mode", mode, "dynamic | frozen[@s] | folded[@s] | moving-average@gamma");
    eval->add_option("--seed", seed, "override run.seed for data generation");
    eval->add_option("--sequences", sequences, "evaluation sequences (default train.eval_sequences)");
    eval->add_option("--out", out, "output directory (default <ckpt dir>/eval)");

    auto* spec = app.add_subcommand("specialize", "capture a context and write a specialized checkpoint");
    spec->add_option("checkpoint", ckpt_path, "source checkpoint")->required()->check(CLI::ExistingFile);
    spec->add_option("prefix", prefix_path, "prefix file (tokens, or CSV rows when continuous)")
        ->required()
        ->check(CLI::ExistingFile);
    spec->add_option("--freeze-at", freeze_at, "1-based capture position (default prefix end)");
    spec->add_flag("--fold", do_fold, "fold the modulators into the stage-2 weights");
    spec->add_option("--out", out, "output checkpoint path");

    auto* probe = app.add_subcommand("probe", "linear probe of task multipliers from the context");
    probe->add_option("checkpoint", ckpt_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    probe->add_option("--config", config_path, "dataset config")->required()->check(CLI::ExistingFile);
    probe->add_option("--set", sets, "override a config key, key=value");
    probe->add_option("--seed", seed, "override run.seed for data generation");
    probe->add_option("--sequences", sequences, "probe evaluation sequences");
    probe->add_option("--out", out, "output directory (default <ckpt dir>/eval)");

    auto* dump = app.add_subcommand("dump", "dot-product matrices and document embeddings");
    dump->add_option("checkpoint", ckpt_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    dump->add_option("--config", config_path, "dataset config")->required()->check(CLI::ExistingFile);
    dump->add_option("--set", sets, "override a config key, key=value");
    dump->add_option("--seed", seed, "override run.seed for data generation");
    dump->add_option("--sequences", sequences, "sequences to dump (default 4)");
    dump->add_option("--out", out, "output directory (default <ckpt dir>/eval)");

    auto* gen = app.add_subcommand("gen-data", "write dataset samples for inspection");
    gen->add_option("--config", config_path, "dataset config")->required()->check(CLI::ExistingFile);
    gen->add_option("--set", sets, "override a config key, key=value");
    gen->add_option("--seed", seed, "override run.seed");
    gen->add_option("--n", count, "number of samples (default 16)");
    gen->add_option("--out", out, "output file");

    auto* oracle = app.add_subcommand("oracle", "run the kernel and fold self-checks");
    oracle->add_option("--seed", seed, "oracle seed (default 1)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(train))
            return run_train(config_path, sets, train->count("--seed") > 0, seed, out);
        if (app.got_subcommand(eval))
            return run_eval(ckpt_path, config_path, sets, mode, eval->count("--seed") > 0, seed,
                            sequences, out);
        if (app.got_subcommand(spec))
            return run_specialize(ckpt_path, prefix_path, freeze_at, do_fold, out);
        if (app.got_subcommand(probe))
            return run_probe(ckpt_path, config_path, sets, probe->count("--seed") > 0, seed,
                             sequences, out);
        if (app.got_subcommand(dump))
            return run_dump(ckpt_path, config_path, sets, dump->count("--seed") > 0, seed,
                            sequences, out);
        if (app.got_subcommand(gen))
            return run_gendata(config_path, sets, gen->count("--seed") > 0, seed, count, out);
        if (app.got_subcommand(oracle))
            return run_oracle(oracle->count("--seed") ? seed : 1);
    } catch (const std::exception& e) {
        std::cerr << "cgt: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
