#pragma once

#include "convscm/autodiff.hpp"
#include "convscm/matrix.hpp"
#include "convscm/rng.hpp"
#include "convscm/scm.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace convscm {

enum class AttentionMode {
    least_squares,  // ridge regression of each target key on its predecessors' keys
    softmax,        // masked row softmax of LeakyReLU(row + column logits)
    leaky_ratio,    // LeakyReLU(logit) / row sum, denominator clamped
};

enum class LatentMode { gaussian, gumbel_softmax };

enum class InitScheme {
    scm_identity,  // encoder/decoder start as sign-split identities, keys as identity
    glorot,
};

std::string to_string(AttentionMode m);
std::string to_string(LatentMode m);
std::string to_string(InitScheme m);
AttentionMode attention_mode_from_string(const std::string& s);
LatentMode latent_mode_from_string(const std::string& s);
InitScheme init_scheme_from_string(const std::string& s);

struct ModelConfig {
    std::size_t input_dim = 50;
    std::size_t hidden_dim = 300;
    std::size_t implicit_dim = 50;
    std::size_t layers = 1;
    AttentionMode attention = AttentionMode::least_squares;
    double ridge = 1.0;
    double leaky_slope = 0.2;
    double ratio_clamp = 1e-8;
    LatentMode latent = LatentMode::gaussian;
    double temperature = 1.0;
    double dropout = 0.3;
    bool use_decoder = true;        // false gives the "-E" ablation: task heads read the encoder output
    double strength_gain_init = 8.0;
    InitScheme init = InitScheme::scm_identity;
    double init_noise = 0.01;

    void validate() const;
};

struct EncoderLayerParams {
    ad::Parameter key;    // least_squares: D_l x D_l key projection
    ad::Parameter w_row;  // softmax / leaky_ratio: D_l x 1
    ad::Parameter w_col;  // softmax / leaky_ratio: D_l x 1
    ad::Parameter weight; // D_l x D_{l+1}
};

// All learnable weights. Parameter order is stable and defines the checkpoint layout.
struct ModelParams {
    std::vector<EncoderLayerParams> encoder;
    ad::Parameter encoder_out;  // hidden x implicit
    std::vector<ad::Parameter> decoder;
    ad::Parameter decoder_out;  // hidden x input
    ad::Parameter pair_bilinear;
    ad::Parameter pair_gain;
    ad::Parameter pair_bias;
    ad::Parameter emotion_weight;  // row weights, input x 1
    ad::Parameter emotion_spread;  // weight on the row's centered mean square, 1 x 1
    ad::Parameter emotion_bias;

    std::vector<ad::Parameter*> all();
    std::vector<const ad::Parameter*> all() const;
    std::vector<ad::Parameter*> emotion_probe();
};

struct LatentPosterior {
    Matrix mean;  // E-hat
    Matrix sample;
    LatentMode mode = LatentMode::gaussian;
    double temperature = 1.0;
};

struct EncodeResult {
    CausalStrength causal_strength;
    LatentPosterior latent;
    std::vector<Matrix> hidden;  // H^1 .. H^L (post-activation)
};

struct TaskOutputs {
    Matrix pair_scores;     // N x N, zero on and above the diagonal
    Matrix emotion_logits;  // N x 1
};

// Differentiable trace of one dialogue through the model.
struct ForwardTrace {
    ad::Var strength;        // N x N
    ad::Var e_hat;           // N x implicit
    ad::Var z;               // N x implicit
    ad::Var log_z;           // gumbel mode only
    ad::Var h_hat;           // N x input
    ad::Var pair_logits;     // N x N
    ad::Var emotion_h_hat;   // N x 1
    ad::Var emotion_e_hat;   // N x 1 when implicit width == input width
    std::vector<ad::Var> hidden;
};

struct ForwardOptions {
    bool training = false;    // enables dropout
    bool sample = false;      // latent noise
    SplitMix64* rng = nullptr;
};

class VgaeModel {
public:
    explicit VgaeModel(ModelConfig cfg, std::uint64_t seed = 0);
    // Copies own their parameters; graphs built from one never touch the other.
    VgaeModel(const VgaeModel& other);
    VgaeModel& operator=(const VgaeModel& other);
    VgaeModel(VgaeModel&&) noexcept = default;
    VgaeModel& operator=(VgaeModel&&) noexcept = default;

    const ModelConfig& config() const noexcept { return cfg_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

    // valid: per-utterance flag, false for padding rows. Empty means all valid.
    ForwardTrace forward(const Matrix& h, const std::vector<bool>& valid, const ForwardOptions& opt) const;

    ad::Var attention(const ad::Var& h, std::size_t layer, const Matrix& allow) const;
    ad::Var encode_var(const ad::Var& h, const Matrix& allow, const Matrix& row_mask, const ForwardOptions& opt,
                       ad::Var* strength, std::vector<ad::Var>* hidden) const;
    ad::Var decode_var(const ad::Var& z, const ad::Var& strength, const Matrix& row_mask, const ForwardOptions& opt) const;
    ad::Var emotion_var(const ad::Var& rows) const;
    ad::Var pair_logits_var(const ad::Var& h_hat, const ad::Var& strength) const;

    std::uint64_t parameter_hash() const;

private:
    ModelConfig cfg_;
    ModelParams params_;
};

Matrix allow_mask(std::size_t n, const std::vector<bool>& valid);

// Plain-matrix entry points.
CausalStrength attention_matrix(const Matrix& h, const VgaeModel& model, std::size_t layer,
                                const std::vector<bool>& valid = {});
Matrix encoder_layer(const Matrix& h, const CausalStrength& a, const Matrix& w);
EncodeResult encode(const Matrix& h, const VgaeModel& model, const std::vector<bool>& valid = {});
// rng == nullptr gives the noise-free evaluation sample.
LatentPosterior sample_latent(const Matrix& e_hat, LatentMode mode, double temperature, SplitMix64* rng);
Matrix decode(const Matrix& z, const CausalStrength& a, const VgaeModel& model);
TaskOutputs task_heads(const Matrix& h_hat, const CausalStrength& a, const VgaeModel& model);

struct ElboTerms {
    ad::Var total;  // mse + beta * kl
    ad::Var mse;
    ad::Var kl;
};

// MSE: mean over features, averaged over valid rows. KL: gaussian 0.5*|E|^2 per element;
// gumbel: log q(z) - log p(z) at the drawn sample, per element.
ElboTerms elbo_loss(const ad::Var& h, const ad::Var& h_hat, const ad::Var& e_hat, const ad::Var& z,
                    const ad::Var& log_z, LatentMode mode, double temperature, double beta,
                    const std::vector<bool>& valid = {});
double elbo_loss(const Matrix& h, const Matrix& h_hat, const LatentPosterior& latent, double beta = 1.0);

// Concrete (relaxed one-hot) log density of rows of log_z under logits, summed over rows.
ad::Var concrete_log_density(const ad::Var& logits, const ad::Var& log_z, double temperature);
// Standard normal log density of z, summed.
ad::Var normal_log_density(const ad::Var& z);

// Binary checkpoint: magic, version, config JSON, then named tensors (little-endian doubles).
void save_checkpoint(const VgaeModel& model, const std::filesystem::path& path);
VgaeModel load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

}  // namespace convscm
