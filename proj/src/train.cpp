#include "cgt/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cgt/checkpoint.hpp"
#include "cgt/optim.hpp"
#include "cgt/protocol.hpp"

#ifndef CGT_BUILD_ID
#define CGT_BUILD_ID "dev"
#endif

namespace cgt {

namespace {

namespace fs = std::filesystem;

enum : uint64_t { kInitKey = 1, kDataKey = 2, kAuxKey = 3, kEvalDataKey = 4, kEvalAuxKey = 5 };

void validate_run(const RunConfig& cfg) {
    cfg.model.validate();
    switch (cfg.dataset) {
        case DatasetKind::icl: {
            if (cfg.model.input_mode != InputMode::token)
                throw ShapeError("train: icl data needs model.input_mode=token");
            if (cfg.model.vocab_size != icl_vocab::kSize)
                throw ShapeError("train: icl data needs model.vocab_size=" +
                                 std::to_string(icl_vocab::kSize));
            const int need = cfg.icl.n_tasks * icl_task_len(cfg.icl);
            if (need > cfg.model.max_seq_len)
                throw ShapeError("train: icl sequence length " + std::to_string(need) +
                                 " exceeds model.max_seq_len " +
                                 std::to_string(cfg.model.max_seq_len));
            break;
        }
        case DatasetKind::linreg: {
            if (cfg.model.input_mode != InputMode::continuous)
                throw ShapeError("train: linreg data needs model.input_mode=continuous");
            if (cfg.model.d_in != cfg.linreg.d_in || cfg.model.d_out != cfg.linreg.d_out)
                throw ShapeError("train: model d_in/d_out must match data.d_in/data.d_out");
            if (2 * cfg.linreg.n_pairs > cfg.model.max_seq_len)
                throw ShapeError("train: linreg sequence length " +
                                 std::to_string(2 * cfg.linreg.n_pairs) +
                                 " exceeds model.max_seq_len " +
                                 std::to_string(cfg.model.max_seq_len));
            break;
        }
        case DatasetKind::text: {
            if (cfg.model.input_mode != InputMode::token)
                throw ShapeError("train: text data needs model.input_mode=token");
            if (cfg.model.vocab_size != byte_vocab::kSize)
                throw ShapeError("train: text data needs model.vocab_size=" +
                                 std::to_string(byte_vocab::kSize));
            if (cfg.text.corpus_paths.empty())
                throw ShapeError("train: text data needs data.corpus paths");
            break;
        }
    }
    if (cfg.opt.batch < 1) throw ShapeError("train: opt.batch must be >= 1");
    if (cfg.opt.total_steps < 1) throw ShapeError("train: opt.steps must be >= 1");
}

std::vector<IclSequence> draw_icl(const SyntheticTaskSpec& spec, Rng& rng, int count) {
    std::vector<IclSequence> seqs;
    seqs.reserve(size_t(count));
    for (int i = 0; i < count; ++i) seqs.push_back(gen_icl_sequence(spec, rng));
    return seqs;
}

std::vector<LinRegSequence> draw_linreg(const LinearRegSpec& spec, int width, Rng& rng,
                                        int count) {
    std::vector<LinRegSequence> seqs;
    seqs.reserve(size_t(count));
    for (int i = 0; i < count; ++i) seqs.push_back(gen_linreg_sequence(spec, width, rng));
    return seqs;
}

TokenBatch pack_text(const TextMixSpec& spec, Rng& rng, int count) {
    std::vector<TextMixSequence> seqs;
    int min_len = INT32_MAX;
    for (int i = 0; i < count; ++i) {
        seqs.push_back(gen_text_mixture(spec, rng));
        min_len = std::min<int>(min_len, int(seqs.back().tokens.size()));
    }
    if (min_len < 2) throw ShapeError("train: text excerpts too short to form a batch");
    TokenBatch b;
    b.batch = count;
    b.seq = min_len;
    for (const auto& s : seqs)
        b.ids.insert(b.ids.end(), s.tokens.begin(), s.tokens.begin() + min_len);
    return b;
}

double node_val(Node<float>* n) { return n ? double(n->val[0]) : 0.0; }

struct CsvWriter {
    std::ofstream out;
    explicit CsvWriter(const std::string& path, const std::string& header) : out(path) {
        if (!out) throw ShapeError("train: cannot write " + path);
        out.precision(12);
        out << header << "\n";
    }
};

}  // namespace

TrainStats train_run(const RunConfig& cfg) {
    validate_run(cfg);
    fs::create_directories(cfg.output_dir);
    {
        std::ofstream c(cfg.output_dir + "/config.txt");
        if (!c) throw ShapeError("train: cannot write " + cfg.output_dir + "/config.txt");
        c << serialize_run_config(cfg);
        std::ofstream b(cfg.output_dir + "/build.txt");
        b << "build=" << CGT_BUILD_ID << "\nseed=" << cfg.seed << "\n";
    }

    Model<float> model(cfg.model);
    Rng root(cfg.seed);
    {
        Rng init = root.fork(kInitKey);
        model.init_weights(init);
    }
    Rng data_rng = root.fork(kDataKey);
    Rng aux_rng = root.fork(kAuxKey);

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.opt.lr;
    adam_cfg.weight_decay = cfg.opt.weight_decay;
    Adam<float> opt(model.params(), adam_cfg);

    // one fixed evaluation set for comparable numbers across the run
    std::vector<IclSequence> eval_icl;
    std::vector<LinRegSequence> eval_linreg;
    TokenBatch eval_text;
    {
        Rng eval_rng = root.fork(kEvalDataKey);
        if (cfg.dataset == DatasetKind::icl)
            eval_icl = draw_icl(cfg.icl, eval_rng, cfg.eval_sequences);
        else if (cfg.dataset == DatasetKind::linreg)
            eval_linreg = draw_linreg(cfg.linreg, cfg.model.d_in, eval_rng, cfg.eval_sequences);
        else
            eval_text = pack_text(cfg.text, eval_rng, cfg.eval_sequences);
    }

    CsvWriter loss_csv(cfg.output_dir + "/loss.csv", "step,lr,total,ce,aux,rc,rd,kl");
    CsvWriter eval_csv(cfg.output_dir + "/eval.csv", "step,metric,value");

    const VaeObjective* vae = cfg.use_vae ? &cfg.vae : nullptr;
    TrainStats stats;
    stats.best_eval = std::numeric_limits<double>::infinity();
    const std::string last_path = cfg.output_dir + "/last.ckpt";
    const std::string best_path = cfg.output_dir + "/best.ckpt";
    const std::string final_path = cfg.output_dir + "/final.ckpt";
    const std::string prov_base = "train seed=" + std::to_string(cfg.seed);

    auto run_eval = [&](int step) {
        Rng eaux = root.fork(kEvalAuxKey).fork(uint64_t(step));
        double total = 0.0;
        if (cfg.dataset == DatasetKind::icl) {
            GraphF g;
            TokenBatch b = pack_icl(eval_icl, 0, eval_icl.size());
            auto parts = joint_loss(g, model, b, cfg.loss, eaux, vae);
            total = node_val(parts.total);
            eval_csv.out << step << ",eval_total," << total << "\n";
            eval_csv.out << step << ",eval_ce," << node_val(parts.lce) << "\n";
            auto dyn = answer_accuracy(model, eval_icl, Segment::e2);
            auto spec = icl_specialized_accuracy(model, eval_icl);
            eval_csv.out << step << ",acc_dynamic_e2," << dyn.fraction() << "\n";
            eval_csv.out << step << ",acc_specialized_e2," << spec.fraction() << "\n";
        } else if (cfg.dataset == DatasetKind::linreg) {
            GraphF g;
            auto b = pack_linreg<float>(eval_linreg, 0, eval_linreg.size());
            auto parts = joint_loss(g, model, b, cfg.loss, eaux, vae);
            total = node_val(parts.total);
            eval_csv.out << step << ",eval_total," << total << "\n";
            eval_csv.out << step << ",eval_ce," << node_val(parts.lce) << "\n";
            auto lr_rep = linreg_specialized_error(model, cfg.linreg, eval_linreg,
                                                   cfg.linreg.n_pairs / 2);
            eval_csv.out << step << ",linreg_model_mse," << lr_rep.model_mse << "\n";
            eval_csv.out << step << ",linreg_ridge_mse," << lr_rep.ridge_mse << "\n";
        } else {
            GraphF g;
            auto parts = joint_loss(g, model, eval_text, cfg.loss, eaux, vae);
            total = node_val(parts.total);
            eval_csv.out << step << ",eval_total," << total << "\n";
            eval_csv.out << step << ",eval_ce," << node_val(parts.lce) << "\n";
        }
        eval_csv.out.flush();
        if (total < stats.best_eval) {
            stats.best_eval = total;
            save_checkpoint(best_path, model, false,
                            prov_base + " step=" + std::to_string(step) + " best");
            stats.best_checkpoint = best_path;
        }
    };

    for (int step = 0; step < cfg.opt.total_steps; ++step) {
        const double lr = cosine_lr(step, cfg.opt.warmup, cfg.opt.total_steps, cfg.opt.lr);
        opt.set_lr(lr);

        GraphF g;
        LossParts<float> parts;
        if (cfg.dataset == DatasetKind::icl) {
            auto seqs = draw_icl(cfg.icl, data_rng, cfg.opt.batch);
            TokenBatch b = pack_icl(seqs, 0, seqs.size());
            parts = joint_loss(g, model, b, cfg.loss, aux_rng, vae);
        } else if (cfg.dataset == DatasetKind::linreg) {
            auto seqs = draw_linreg(cfg.linreg, cfg.model.d_in, data_rng, cfg.opt.batch);
            auto b = pack_linreg<float>(seqs, 0, seqs.size());
            parts = joint_loss(g, model, b, cfg.loss, aux_rng, vae);
        } else {
            TokenBatch b = pack_text(cfg.text, data_rng, cfg.opt.batch);
            parts = joint_loss(g, model, b, cfg.loss, aux_rng, vae);
        }

        const double total = node_val(parts.total);
        loss_csv.out << step << "," << lr << "," << total << "," << node_val(parts.lce) << ","
                     << node_val(parts.laux) << "," << node_val(parts.rc) << ","
                     << node_val(parts.rd) << "," << node_val(parts.kl) << "\n";
        stats.final_loss = total;

        if (!std::isfinite(total)) {
            loss_csv.out.flush();
            stats.nan_abort = true;
            stats.steps_done = step;
            return stats;
        }

        g.backward(parts.total);
        opt.step();
        stats.steps_done = step + 1;

        const int done = step + 1;
        if (cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.opt.total_steps))
            run_eval(done);
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_checkpoint(last_path, model, false,
                            prov_base + " step=" + std::to_string(done));
            stats.last_checkpoint = last_path;
        }
    }

    save_checkpoint(final_path, model, false,
                    prov_base + " step=" + std::to_string(cfg.opt.total_steps) + " final");
    stats.final_checkpoint = final_path;
    if (stats.last_checkpoint.empty()) {
        save_checkpoint(last_path, model, false,
                        prov_base + " step=" + std::to_string(cfg.opt.total_steps));
        stats.last_checkpoint = last_path;
    }
    return stats;
}

}  // namespace cgt
