#pragma once

#include <string>

#include "cgt/config.hpp"

namespace cgt {

struct TrainStats {
    int steps_done = 0;
    bool nan_abort = false;
    double final_loss = 0;
    double best_eval = 0;
    std::string final_checkpoint;  // empty after a NaN abort
    std::string best_checkpoint;
    std::string last_checkpoint;
};

// Seeded end-to-end training run. Writes into cfg.output_dir: config.txt
// (exact serialized config), build.txt, loss.csv (one row per step),
// eval.csv, last.ckpt on the periodic cadence, best.ckpt on eval
// improvement, final.ckpt on clean completion. A non-finite loss aborts and
// retains the last periodic checkpoint.
TrainStats train_run(const RunConfig& cfg);

}  // namespace cgt
