#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cgt/checkpoint.hpp"
#include "cgt/datasets.hpp"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string("\"") + CGT_CLI_PATH + "\" " + args;
    return std::system(cmd.c_str());
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::stringstream ss(slurp(p));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

fs::path scratch() {
    const fs::path dir = "cli_scratch";
    fs::create_directories(dir);
    return dir;
}

void write_tiny_config(const fs::path& p, int steps) {
    std::ofstream out(p);
    out << "model.n_layers = 3\nmodel.readout_layer = 1\nmodel.dim_x = 32\n"
           "model.dim_y = 16\nmodel.heads_x = 2\nmodel.heads_y = 2\nmodel.mlp_mult = 2\n"
           "model.rank = 2\nmodel.n_templates = 4\nmodel.vocab_size = 16\n"
           "model.max_seq_len = 122\ndata.kind = icl\ndata.n_tasks = 2\ndata.n_ex = 4\n"
           "data.digits = 3\nopt.steps = "
        << steps
        << "\nopt.batch = 2\nopt.warmup = 2\nrun.seed = 7\ntrain.eval_every = 1000\n"
           "train.eval_sequences = 4\ntrain.checkpoint_every = 1000\n";
}

// every row without the run-name and mode columns
std::string csv_tail(const fs::path& p) {
    std::string out;
    for (const auto& line : lines_of(p)) {
        std::stringstream ss(line);
        std::string cell;
        for (int col = 0; std::getline(ss, cell, ','); ++col)
            if (col != 0 && col != 2) out += cell + ',';
        out += '\n';
    }
    return out;
}

}  // namespace

TEST_CASE("train, specialize and eval round trip through the binary") {
    const fs::path dir = scratch();
    write_tiny_config(dir / "run.cfg", 5);

    REQUIRE(run("train " + (dir / "run.cfg").string() + " --out " + (dir / "r1").string()) == 0);
    REQUIRE(fs::exists(dir / "r1/final.ckpt"));
    REQUIRE(fs::exists(dir / "r1/loss.csv"));
    CHECK(lines_of(dir / "r1/loss.csv").size() == 6);  // header + 5 steps

    const std::string ckpt = (dir / "r1/final.ckpt").string();
    const std::string cfg = (dir / "run.cfg").string();

    REQUIRE(run("eval " + ckpt + " --config " + cfg + " --sequences 4 --out " +
                (dir / "ev_dyn").string()) == 0);
    CHECK(lines_of(dir / "ev_dyn/accuracy.csv").size() == 4);  // header + e1/e2/all
    CHECK(lines_of(dir / "ev_dyn/variation.csv").size() == 4 * 2 + 2);

    // two prefixes -> two specialized checkpoints with distinct provenance
    REQUIRE(run("gen-data --config " + cfg + " --n 2 --out " + (dir / "pool.txt").string()) == 0);
    const auto pool = lines_of(dir / "pool.txt");
    REQUIRE(pool.size() == 2);
    std::ofstream(dir / "p1.txt") << pool[0];
    std::ofstream(dir / "p2.txt") << pool[1];

    const std::string spec1 = (dir / "spec1.ckpt").string();
    const std::string spec2 = (dir / "spec2.ckpt").string();
    const std::string fold1 = (dir / "fold1.ckpt").string();
    REQUIRE(run("specialize " + ckpt + " " + (dir / "p1.txt").string() +
                " --freeze-at 30 --out " + spec1) == 0);
    REQUIRE(run("specialize " + ckpt + " " + (dir / "p2.txt").string() +
                " --freeze-at 30 --out " + spec2) == 0);
    REQUIRE(run("specialize " + ckpt + " " + (dir / "p1.txt").string() +
                " --freeze-at 30 --fold --out " + fold1) == 0);

    CHECK(fs::file_size(spec1) < fs::file_size(ckpt));
    CHECK(fs::file_size(fold1) < fs::file_size(ckpt));

    const auto meta1 = cgt::read_checkpoint_meta(spec1);
    const auto meta2 = cgt::read_checkpoint_meta(spec2);
    CHECK(meta1.specialized);
    CHECK(meta1.provenance.find("prefix_fnv=") != std::string::npos);
    CHECK(meta1.provenance != meta2.provenance);

    // folded eval of the unfolded specialization reproduces its frozen metrics
    REQUIRE(run("eval " + spec1 + " --config " + cfg + " --mode frozen --sequences 4 --out " +
                (dir / "ev_frz").string()) == 0);
    REQUIRE(run("eval " + spec1 + " --config " + cfg + " --mode folded --sequences 4 --out " +
                (dir / "ev_fld").string()) == 0);
    REQUIRE(run("eval " + fold1 + " --config " + cfg + " --mode folded --sequences 4 --out " +
                (dir / "ev_fld2").string()) == 0);
    CHECK(csv_tail(dir / "ev_frz/accuracy.csv") == csv_tail(dir / "ev_fld/accuracy.csv"));
    CHECK(csv_tail(dir / "ev_frz/accuracy.csv") == csv_tail(dir / "ev_fld2/accuracy.csv"));

    // moving-average at gamma 1 matches the dynamic scores
    REQUIRE(run("eval " + ckpt + " --config " + cfg +
                " --mode moving-average@1.0 --sequences 4 --out " + (dir / "ev_ma").string()) == 0);
    CHECK(csv_tail(dir / "ev_ma/accuracy.csv") == csv_tail(dir / "ev_dyn/accuracy.csv"));
}

TEST_CASE("cli rejects bad inputs with nonzero exits") {
    const fs::path dir = scratch();
    write_tiny_config(dir / "run.cfg", 2);
    const std::string cfg = (dir / "run.cfg").string();

    REQUIRE(run("train " + cfg + " --out " + (dir / "r2").string()) == 0);
    const std::string ckpt = (dir / "r2/final.ckpt").string();
    std::ofstream(dir / "pfx.txt") << "012*023=+00035|";

    const std::string null_sink = " > cli_err.txt 2>&1";
    CHECK(run("train " + cfg + " --set typo.key=1 --out " + (dir / "r3").string() + null_sink) != 0);
    CHECK(slurp("cli_err.txt").find("typo.key") != std::string::npos);

    CHECK(run("eval " + ckpt + " --config " + cfg + " --mode nonsense" + null_sink) != 0);
    CHECK(run("specialize " + ckpt + " " + (dir / "pfx.txt").string() + " --freeze-at 99" +
              null_sink) != 0);
    CHECK(slurp("cli_err.txt").find("outside prefix length") != std::string::npos);

    // a specialized checkpoint cannot run dynamically or be re-specialized
    const std::string spec = (dir / "r2spec.ckpt").string();
    REQUIRE(run("specialize " + ckpt + " " + (dir / "pfx.txt").string() + " --out " + spec) == 0);
    CHECK(run("eval " + spec + " --config " + cfg + null_sink) != 0);
    CHECK(run("specialize " + spec + " " + (dir / "pfx.txt").string() + null_sink) != 0);
}

TEST_CASE("gen-data output re-tokenizes and dump shapes hold") {
    const fs::path dir = scratch();
    write_tiny_config(dir / "run.cfg", 2);
    const std::string cfg = (dir / "run.cfg").string();

    REQUIRE(run("gen-data --config " + cfg + " --n 3 --seed 11 --out " +
                (dir / "samples.txt").string()) == 0);
    const auto samples = lines_of(dir / "samples.txt");
    REQUIRE(samples.size() == 3);
    for (const auto& s : samples) {
        const auto toks = cgt::icl_vocab::tokenize(s);
        CHECK(int(toks.size()) == 2 * cgt::icl_task_len({2, 4, 3}));
        CHECK(cgt::icl_vocab::detokenize(toks) == s);
    }

    REQUIRE(run("train " + cfg + " --out " + (dir / "r4").string()) == 0);
    REQUIRE(run("dump " + (dir / "r4/final.ckpt").string() + " --config " + cfg +
                " --sequences 2 --out " + (dir / "dmp").string()) == 0);
    const auto mat = lines_of(dir / "dmp/dotmat_seq0.csv");
    REQUIRE(mat.size() == 122);
    for (const auto& row : mat)
        CHECK(std::count(row.begin(), row.end(), ',') == 121);
    CHECK(lines_of(dir / "dmp/embeddings.csv").size() == 3);  // header + 2 docs

    REQUIRE(run("probe " + (dir / "r4/final.ckpt").string() + " --config " + cfg +
                " --sequences 2 --out " + (dir / "prb").string()) == 0);
    const auto probe_rows = lines_of(dir / "prb/probe.csv");
    REQUIRE(probe_rows.size() == 4);  // header + a, b, all
    CHECK(probe_rows[0] == "run,target,rows_train,rows_eval,mae,mae_shuffled,underdetermined");
}

TEST_CASE("oracle self-checks pass") {
    CHECK(run("oracle --seed 5 > oracle_out.txt") == 0);
    const std::string out = slurp("oracle_out.txt");
    CHECK(out.find("PASS fewshot kernel") != std::string::npos);
    CHECK(out.find("PASS fold equivalence (float32)") != std::string::npos);
    CHECK(out.find("PASS fold equivalence (float64)") != std::string::npos);
    CHECK(out.find("FAIL") == std::string::npos);
}
