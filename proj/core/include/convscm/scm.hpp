#pragma once

#include "convscm/matrix.hpp"
#include "convscm/rng.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace convscm {

// Utterance-to-utterance effect weights. Entry (i, j) is the weight of cause j on effect i.
class CausalStrength {
public:
    CausalStrength() = default;
    explicit CausalStrength(std::size_t n) : w_(n, n) {}
    explicit CausalStrength(Matrix weights);  // throws ContractError unless strictly lower

    std::size_t n() const noexcept { return w_.rows(); }
    const Matrix& weights() const noexcept { return w_; }
    double operator()(std::size_t effect, std::size_t cause) const { return w_(effect, cause); }
    void set(std::size_t effect, std::size_t cause, double v);

private:
    Matrix w_;
};

enum class SkeletonTag { I, II, III, IV };

std::string to_string(SkeletonTag tag);
SkeletonTag skeleton_from_string(const std::string& s);

struct Utterance {
    int speaker = 1;
    std::optional<bool> emotion;
    std::optional<std::string> text;

    friend bool operator==(const Utterance&, const Utterance&) = default;
};

// (effect, cause), zero-based, cause < effect.
using CausePair = std::pair<std::size_t, std::size_t>;

struct Dialogue {
    std::string id;
    std::vector<Utterance> utterances;
    Matrix embeddings;                      // N x D
    std::vector<CausePair> cause_pairs;     // sorted, unique
    std::optional<Matrix> implicit_causes;  // N x D
    std::optional<SkeletonTag> skeleton;
    std::optional<Matrix> true_strength;    // generator ground truth, N x N

    std::size_t size() const noexcept { return utterances.size(); }
    bool has_pair(std::size_t effect, std::size_t cause) const;
    std::vector<double> emotion_flags() const;  // 1/0, missing treated as 0
    void validate() const;                      // throws ContractError

    friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct TemplateDistribution {
    std::size_t min_length = 4;
    std::size_t max_length = 12;
    double emotion_probability = 0.35;
    std::size_t min_pairs = 1;  // per emotional utterance
    std::size_t max_pairs = 2;
};

struct StructureTemplate {
    std::vector<bool> emotion;
    std::vector<CausePair> pairs;

    std::size_t size() const noexcept { return emotion.size(); }
    friend bool operator==(const StructureTemplate&, const StructureTemplate&) = default;
};

struct SyntheticSpec {
    std::size_t dim = 50;
    double emotion_mean = 1.0;
    double non_emotion_mean = -1.0;
    double stddev = 1.0;
    Range cause_weight{0.7, 1.0};
    Range non_cause_weight{0.0, 0.3};
    Range noise{-0.25, 0.25};
    std::size_t train_size = 833;
    std::size_t eval_size = 47;
    std::size_t test_size = 225;
    TemplateDistribution templates;
    std::uint64_t template_seed = 0x5EEDC0DEULL;

    void validate() const;
};

// H = (I - A)^-1 E.
Matrix forward_generate(const CausalStrength& a, const Matrix& e);

StructureTemplate sample_template(const TemplateDistribution& dist, SplitMix64& rng);
std::vector<StructureTemplate> sample_templates(const TemplateDistribution& dist, std::size_t count, std::uint64_t seed);

// Values only; structure comes from the template.
Dialogue generate_synthetic_dialogue(const StructureTemplate& tmpl, const SyntheticSpec& spec, std::uint64_t seed,
                                     std::string id = {});

struct DatasetSplits {
    std::vector<Dialogue> train;
    std::vector<Dialogue> eval;
    std::vector<Dialogue> test;

    std::size_t total() const noexcept { return train.size() + eval.size() + test.size(); }
};

// Templates are drawn from spec.template_seed, values from seed.
DatasetSplits generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed);

enum class Direction { x_causes_y, y_causes_x, undetermined };

std::string to_string(Direction d);

struct ResidualTest {
    Direction direction = Direction::undetermined;
    double dependence_y_on_x = 0.0;  // residual of y ~ x vs x
    double dependence_x_on_y = 0.0;  // residual of x ~ y vs y
};

// Regresses each variable on the other and checks which residual is independent of its regressor.
ResidualTest residual_direction(std::span<const double> x, std::span<const double> y, double threshold = 0.05);

double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace convscm
