#pragma once

#include "convscm/matrix.hpp"
#include "convscm/model.hpp"
#include "convscm/scm.hpp"

#include <compare>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace convscm {

// Which (effect, cause) pairs are scored.
enum class CandidateRule {
    automatic,          // emotional effects when the dialogue carries emotion labels, else all pairs
    emotional_effects,  // only effects flagged emotional
    all_pairs,
};

std::string to_string(CandidateRule r);
CandidateRule candidate_rule_from_string(const std::string& s);

std::vector<CausePair> candidate_pairs(const Dialogue& d, CandidateRule rule);
Matrix candidate_mask(const Dialogue& d, CandidateRule rule);  // N x N, 1 on candidates

struct PairKey {
    std::size_t dialogue = 0;
    std::size_t effect = 0;
    std::size_t cause = 0;

    friend auto operator<=>(const PairKey&, const PairKey&) = default;
};

using PairSet = std::set<PairKey>;

// Pairs with score >= threshold and cause < effect. effect_filter, when given, drops non-flagged effects.
std::vector<CausePair> predict_pairs(const Matrix& pair_scores, double threshold = 0.5,
                                     const std::vector<bool>* effect_filter = nullptr);

// 100 * 2PR / (P + R), 0 when nothing matches.
double f1(const PairSet& preds, const PairSet& labels);

// Noise-free model outputs for one dialogue.
struct DialoguePrediction {
    Matrix strength;     // N x N
    Matrix e_hat;        // N x implicit
    Matrix h_hat;        // N x input
    Matrix pair_scores;  // N x N sigmoid of the unmasked head (strength term is zero above the diagonal)
};

DialoguePrediction predict(const VgaeModel& model, const Dialogue& d);
std::vector<DialoguePrediction> predict_all(const VgaeModel& model, const std::vector<Dialogue>& ds);

struct EceResult {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::size_t predicted = 0;
    std::size_t labeled = 0;
};

EceResult ece_scores(const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds, double threshold = 0.5,
                     CandidateRule rule = CandidateRule::automatic);

// Logistic probe over [row, centered mean square of the row].
class EmotionProbe {
public:
    EmotionProbe() = default;
    EmotionProbe(Matrix weight, double spread, double bias);
    static EmotionProbe from_model(const VgaeModel& model);

    bool trained() const noexcept { return !weight_.empty(); }
    std::size_t width() const noexcept { return weight_.rows(); }
    std::vector<double> logits(const Matrix& rows) const;
    std::vector<bool> predict(const Matrix& rows) const;

private:
    Matrix weight_;  // D x 1
    double spread_ = 0.0;
    double bias_ = 0.0;
};

struct ProbeFitOptions {
    double l2 = 1e-4;
    std::size_t max_iter = 50;
    double tol = 1e-10;
};

// Newton / IRLS logistic regression.
EmotionProbe fit_emotion_probe(const Matrix& rows, const std::vector<bool>& labels, ProbeFitOptions opt = {});

struct IceResult {
    double f1 = 0.0;
    bool interpretable = false;  // f1 > 80
};

// F1 of probe(e_latent) against probe(h) as reference, emotional = positive class.
IceResult ice_consistency(const Matrix& e_latent, const Matrix& h, const EmotionProbe& probe);
IceResult ice_scores(const VgaeModel& model, const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds);

enum class Construction { reversal, chain, common_cause };

std::string to_string(Construction c);
Construction construction_from_string(const std::string& s);

struct DiscriminabilitySets {
    PairSet positive;
    PairSet negative;
};

DiscriminabilitySets build_discriminability_sets(const std::vector<Dialogue>& ds, Construction c);

struct DiscriminabilityResult {
    double pos_f1 = 0.0;
    double neg_f1 = 0.0;
    std::size_t pos_count = 0;
    std::size_t neg_count = 0;
    double gap() const noexcept { return pos_f1 - neg_f1; }
};

// Every sample in a set is scored as a claimed causal pair; F1 per set with threshold.
DiscriminabilityResult discriminability(const std::vector<Matrix>& full_scores, const std::vector<Dialogue>& ds,
                                        Construction c, double threshold = 0.5);

// Skeleton-I dialogues where (U4, U2) is predicted but not labeled.
std::size_t confounder_errors(const std::vector<Matrix>& pair_scores, const std::vector<Dialogue>& ds,
                              double threshold = 0.5);

struct LatentSnapshot {
    std::size_t epoch = 0;
    Matrix rows;                          // stacked latent rows
    std::vector<std::string> utterance_ids;
    std::vector<int> labels;              // 1 emotion, 0 non-emotion
};

struct Projection {
    Matrix coords;                   // M x 2
    double explained[2] = {0.0, 0.0};  // variance ratios
};

// Deterministic PCA to two components; each axis signed so its largest-magnitude loading is positive.
Projection pca_project(const Matrix& rows);
double silhouette(const Matrix& points, const std::vector<int>& labels);

struct ProjectionRow {
    std::size_t epoch;
    std::string utterance_id;
    double x;
    double y;
    std::string cls;
};

std::vector<ProjectionRow> latent_projection_export(const std::vector<LatentSnapshot>& snaps);
void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::filesystem::path& path);

// Row-normalized causal strength with the upper triangle masked, one block per dialogue.
void write_strength_csv(const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds,
                        const std::filesystem::path& path);

struct EvalReport {
    double ece_f1 = 0.0;
    std::optional<double> ice_f1;
    bool interpretable = false;
    std::vector<std::pair<std::string, DiscriminabilityResult>> discriminability;
    std::optional<std::size_t> confounder_errors;
    double threshold = 0.5;
    std::string candidate_rule;

    std::string to_json() const;
};

}  // namespace convscm
