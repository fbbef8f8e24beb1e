#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cgt/datasets.hpp"
#include "cgt/model.hpp"

namespace cgt {

// ------------------------------------------------------------ answer accuracy

enum class Segment { e1, e2, all };

struct AnswerSpan {
    int start = 0;  // token index of the sign character
    int len = 0;
};

// Answer spans of the requested segment, across all tasks of the sequence.
std::vector<AnswerSpan> answer_spans(const IclSequence& seq, Segment seg);

struct AccuracyReport {
    int n_answers = 0;
    int n_correct = 0;
    int n_tokens = 0;
    int n_token_correct = 0;

    double fraction() const { return n_answers ? double(n_correct) / n_answers : 0.0; }
    double token_fraction() const {
        return n_tokens ? double(n_token_correct) / n_tokens : 0.0;
    }
    void merge(const AccuracyReport& o);
};

// Greedy exact-match scoring: the prediction for the token at position p is
// argmax of the logits at p-1 (teacher-forced context). An answer counts only
// if every token in its span is predicted correctly.
template <class S>
AccuracyReport score_answers(const S* logits, int seq, int vocab, const int* tokens,
                             const std::vector<AnswerSpan>& spans);

// Dynamic-mode accuracy over a set of sequences, batched internally.
template <class S>
AccuracyReport answer_accuracy(const Model<S>& m, const std::vector<IclSequence>& seqs,
                               Segment seg, int batch_size = 16);

// ------------------------------------------------------------ variation metric

// Mean step-to-step movement of the centered, variance-normalized trace over
// e2: dy_s = y_s - mean_{E1 u E2}(y); ybar = dy / sqrt(mean_{E1 u E2} |dy|^2);
// result = (1/|E2|) sum_{s in e2} |ybar_s - ybar_{s-1}|. Zero variance -> 0.
// Ranges are half-open token intervals; e2.first must be >= 1.
double representation_variation(const std::vector<double>& y_trace, int dim_y,
                                std::pair<int, int> e1, std::pair<int, int> e2);

struct VariationReport {
    std::vector<double> values;  // one per sequence
    double mean = 0;
    double sigma3 = 0;  // 3 * standard error of the mean
};

VariationReport summarize_variation(const std::vector<double>& values);

// ------------------------------------------------------------ linear probe

struct ProbeResult {
    std::vector<double> w;  // [n_targets, dim_y + 1], bias last
    double mae = 0;         // held-out, in standardized target units
    std::vector<double> mae_per_target;
    bool underdetermined = false;  // fewer train rows than dim_y + 1
};

// Closed-form ridge probe (lambda 1e-6, bias column). Targets are z-scored
// per column with statistics from the evaluation set; MAE is reported in
// those units, so a no-signal probe lands near E|N(0,1)| = sqrt(2/pi).
ProbeResult linear_probe(const std::vector<double>& y_train, const std::vector<double>& t_train,
                         const std::vector<double>& y_eval, const std::vector<double>& t_eval,
                         int dim_y, int n_targets = 2);

// ------------------------------------------------------------ dot products

// M_ij = n_i . n_j for n_s = y_s / |y_s|, clamped to [-1, 1]; the diagonal is
// exactly 1 (zero rows excepted).
std::vector<double> dot_product_matrix(const std::vector<double>& y_trace, int n, int dim_y);

void write_csv_matrix(const std::string& path, const std::vector<double>& m, int n);

// ------------------------------------------------------------ embeddings

struct DocEmbedding {
    std::string doc_id;
    std::string label;
    bool truncated = false;  // fewer than 16 positions were available
    std::vector<double> v;   // [dim_y]
};

// Mean of the last 16 context vectors of the document (deterministic pass).
// Documents longer than the model's window are evaluated on their tail.
template <class S>
DocEmbedding embed_document(const Model<S>& m, const std::vector<int>& tokens,
                            std::string doc_id, std::string label);

// Header: doc_id,label,truncated,v0..v{dim_y-1}
void write_embeddings_csv(const std::string& path, const std::vector<DocEmbedding>& rows);

}  // namespace cgt
