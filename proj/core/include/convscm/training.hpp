#pragma once

#include "convscm/evaluation.hpp"
#include "convscm/model.hpp"
#include "convscm/scm.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace convscm {

struct TrainConfig {
    double learning_rate = 3e-5;
    double probe_learning_rate = 1e-2;  // emotion probe only
    std::size_t batch_size = 32;
    std::size_t epochs = 60;
    ModelConfig model;
    double beta = 1.0;
    double lambda_pair = 1.0;
    double lambda_emotion = 1.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;
    bool sample_latent = true;  // latent noise during training
    double threshold = 0.5;
    CandidateRule candidates = CandidateRule::automatic;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

struct EpochRecord {
    std::size_t epoch = 0;
    double total = 0.0;
    double mse = 0.0;
    double kl = 0.0;
    double pair_bce = 0.0;
    double emotion_ce = 0.0;
    double eval_ece_f1 = 0.0;
    std::optional<double> eval_ice_f1;
};

struct RunHistory {
    std::vector<EpochRecord> epochs;

    void write_csv(const std::filesystem::path& path) const;
};

struct TrainHooks {
    // Latent snapshots of these dialogues are captured after the listed epochs (0 = before training).
    const std::vector<Dialogue>* snapshot_set = nullptr;
    std::vector<std::size_t> snapshot_epochs;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    VgaeModel best;  // highest eval ECE F1 (first such epoch)
    VgaeModel last;
    std::size_t best_epoch = 0;
    RunHistory history;
    std::vector<LatentSnapshot> snapshots;
};

// Per-dialogue loss terms, already scaled by batch normalizers.
struct BatchNormalizers {
    double rows = 1.0;            // valid utterances in the batch
    double implicit_elems = 1.0;  // rows * implicit width
    double pair_candidates = 1.0;
    double emotion_rows = 1.0;    // utterances with an emotion label
};

struct LossParts {
    ad::Var total;
    double mse = 0.0, kl = 0.0, pair_bce = 0.0, emotion_ce = 0.0;
};

LossParts dialogue_loss(const VgaeModel& model, const Dialogue& d, const TrainConfig& cfg, const BatchNormalizers& norm,
                        const ForwardOptions& opt);
BatchNormalizers batch_normalizers(const std::vector<const Dialogue*>& batch, const TrainConfig& cfg);

// Adam over a fixed parameter list, with per-parameter learning rates.
class Adam {
public:
    Adam(std::vector<ad::Parameter*> params, std::vector<double> lrs, double beta1, double beta2, double eps);
    void step();

private:
    std::vector<ad::Parameter*> params_;
    std::vector<double> lrs_;
    std::vector<Matrix> m_, v_;
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
};

double global_grad_norm(const std::vector<ad::Parameter*>& params);
void clip_grad_norm(const std::vector<ad::Parameter*>& params, double max_norm);

TrainResult train(const std::vector<Dialogue>& train_set, const std::vector<Dialogue>& eval_set, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation
};

std::string format_mean_std(const MetricSummary& s);  // "85.46±1.7"
MetricSummary summarize(const std::vector<double>& values);

struct MultiRunResult {
    std::vector<std::string> metrics;
    std::vector<std::vector<double>> runs;  // runs x metrics
    std::vector<MetricSummary> summary;

    std::vector<double> column(const std::string& metric) const;
    std::string table_row() const;
    void write_csv(const std::filesystem::path& path) const;
};

using RunEvaluator = std::function<std::map<std::string, double>(const VgaeModel&, const DatasetSplits&)>;

struct MultiRunOptions {
    std::size_t runs = 10;
    bool resplit = true;          // reshuffle the pooled dialogues per run
    bool force_same_seed = false; // every run uses cfg.seed (sanity check for zero spread)
    bool use_best = true;         // evaluate best-eval checkpoint, else last
};

// Default evaluator: test-split ECE F1, ICE F1 (when widths match) and reversal discriminability.
std::map<std::string, double> default_run_metrics(const VgaeModel& model, const DatasetSplits& data, const TrainConfig& cfg);

DatasetSplits resplit(const DatasetSplits& data, std::uint64_t seed);

MultiRunResult multi_run(const DatasetSplits& data, const TrainConfig& cfg, const MultiRunOptions& opt,
                         const RunEvaluator& evaluate = {});

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    std::size_t dof = 0;
    double mean_diff = 0.0;
    bool significant = false;
    bool degenerate = false;  // zero variance of differences
};

// Two-sided paired t-test, alpha 0.05.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b, double alpha = 0.05);

}  // namespace convscm
