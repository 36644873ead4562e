#include "convscm/model.hpp"

#include "convscm/error.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace convscm {

using namespace ad;

std::string to_string(AttentionMode m) {
    switch (m) {
    case AttentionMode::least_squares: return "least_squares";
    case AttentionMode::softmax: return "softmax";
    case AttentionMode::leaky_ratio: return "leaky_ratio";
    }
    return "?";
}

std::string to_string(LatentMode m) { return m == LatentMode::gaussian ? "gaussian" : "gumbel_softmax"; }

std::string to_string(InitScheme m) { return m == InitScheme::scm_identity ? "scm_identity" : "glorot"; }

AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "least_squares") return AttentionMode::least_squares;
    if (s == "softmax") return AttentionMode::softmax;
    if (s == "leaky_ratio") return AttentionMode::leaky_ratio;
    throw ContractError("unknown attention mode '" + s + "'");
}

LatentMode latent_mode_from_string(const std::string& s) {
    if (s == "gaussian") return LatentMode::gaussian;
    if (s == "gumbel_softmax" || s == "gumbel") return LatentMode::gumbel_softmax;
    throw ContractError("unknown latent mode '" + s + "'");
}

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "scm_identity") return InitScheme::scm_identity;
    if (s == "glorot") return InitScheme::glorot;
    throw ContractError("unknown init scheme '" + s + "'");
}

void ModelConfig::validate() const {
    require(input_dim > 0 && hidden_dim > 0 && implicit_dim > 0, "ModelConfig: dimensions must be positive");
    require(layers >= 1, "ModelConfig: need at least one layer");
    require(ridge > 0.0, "ModelConfig: ridge must be positive");
    require(temperature > 0.0, "ModelConfig: temperature must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "ModelConfig: dropout must be in [0,1)");
    require(ratio_clamp > 0.0, "ModelConfig: ratio clamp must be positive");
}

std::vector<Parameter*> ModelParams::all() {
    std::vector<Parameter*> out;
    for (auto& l : encoder)
        for (Parameter* p : {&l.key, &l.w_row, &l.w_col, &l.weight}) out.push_back(p);
    out.push_back(&encoder_out);
    for (auto& m : decoder) out.push_back(&m);
    for (Parameter* p : {&decoder_out, &pair_bilinear, &pair_gain, &pair_bias, &emotion_weight, &emotion_spread, &emotion_bias})
        out.push_back(p);
    return out;
}

std::vector<const Parameter*> ModelParams::all() const {
    auto* self = const_cast<ModelParams*>(this);
    auto v = self->all();
    return {v.begin(), v.end()};
}

std::vector<Parameter*> ModelParams::emotion_probe() { return {&emotion_weight, &emotion_spread, &emotion_bias}; }

namespace {

Matrix glorot(std::size_t in, std::size_t out, SplitMix64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix m(in, out);
    for (double& v : m.data()) v = rng.uniform(-limit, limit);
    return m;
}

Matrix noise(std::size_t r, std::size_t c, double sd, SplitMix64& rng) {
    Matrix m(r, c);
    for (double& v : m.data()) v = sd * rng.normal();
    return m;
}

// [I, -I, 0]: keeps both signs alive through the ELU.
Matrix split_identity(std::size_t in, std::size_t out, double sd, SplitMix64& rng) {
    Matrix m = noise(in, out, sd, rng);
    for (std::size_t i = 0; i < in; ++i) {
        m(i, i) += 1.0;
        m(i, in + i) -= 1.0;
    }
    return m;
}

// [I; -I; 0] / 2: recombines the two halves. ELU(x) - ELU(-x) has slope 2 at the origin.
Matrix merge_identity(std::size_t in, std::size_t out, double sd, SplitMix64& rng) {
    Matrix m = noise(in, out, sd, rng);
    for (std::size_t i = 0; i < out; ++i) {
        m(i, i) += 0.5;
        m(out + i, i) -= 0.5;
    }
    return m;
}

Matrix square_identity(std::size_t n, double sd, SplitMix64& rng) {
    Matrix m = noise(n, n, sd, rng);
    for (std::size_t i = 0; i < n; ++i) m(i, i) += 1.0;
    return m;
}

Matrix dropout_mask(std::size_t r, std::size_t c, double rate, SplitMix64& rng) {
    Matrix m(r, c);
    const double keep = 1.0 - rate;
    for (double& v : m.data()) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return m;
}

Matrix row_mask_from(std::size_t n, const std::vector<bool>& valid) {
    Matrix m(n, 1, 1.0);
    if (!valid.empty())
        for (std::size_t i = 0; i < n; ++i) m(i, 0) = valid[i] ? 1.0 : 0.0;
    return m;
}

std::size_t count_valid(std::size_t n, const std::vector<bool>& valid) {
    if (valid.empty()) return n;
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) c += valid[i] ? 1 : 0;
    return c;
}

}  // namespace

Matrix allow_mask(std::size_t n, const std::vector<bool>& valid) {
    require(valid.empty() || valid.size() == n, "allow_mask: mask length differs from utterance count");
    Matrix m(n, n);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t i = 0; i < t; ++i)
            if (valid.empty() || (valid[t] && valid[i])) m(t, i) = 1.0;
    return m;
}

VgaeModel::VgaeModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng(derive_seed(seed, "model-init"));
    const bool ident = cfg_.init == InitScheme::scm_identity;
    const double sd = cfg_.init_noise;
    const std::size_t hid = cfg_.hidden_dim;

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::size_t in = l == 0 ? cfg_.input_dim : hid;
        const std::string tag = "encoder." + std::to_string(l) + ".";
        EncoderLayerParams p;
        p.key = Parameter(tag + "key", ident ? square_identity(in, sd, rng) : glorot(in, in, rng));
        p.w_row = Parameter(tag + "w_row", noise(in, 1, 0.1, rng));
        p.w_col = Parameter(tag + "w_col", noise(in, 1, 0.1, rng));
        Matrix w;
        if (ident && l == 0 && hid >= 2 * in) w = split_identity(in, hid, sd, rng);
        else if (ident && l > 0) w = square_identity(hid, sd, rng);
        else w = glorot(in, hid, rng);
        p.weight = Parameter(tag + "weight", std::move(w));
        params_.encoder.push_back(std::move(p));
    }
    const bool merge_enc = ident && hid >= 2 * cfg_.implicit_dim && cfg_.implicit_dim == cfg_.input_dim;
    params_.encoder_out = Parameter("encoder.out", merge_enc ? merge_identity(hid, cfg_.implicit_dim, sd, rng)
                                                             : glorot(hid, cfg_.implicit_dim, rng));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::size_t in = l == 0 ? cfg_.implicit_dim : hid;
        Matrix m;
        if (ident && l == 0 && hid >= 2 * in) m = split_identity(in, hid, sd, rng);
        else if (ident && l > 0) m = square_identity(hid, sd, rng);
        else m = glorot(in, hid, rng);
        params_.decoder.emplace_back("decoder." + std::to_string(l), std::move(m));
    }
    params_.decoder_out = Parameter("decoder.out", ident && hid >= 2 * cfg_.input_dim
                                                       ? merge_identity(hid, cfg_.input_dim, sd, rng)
                                                       : glorot(hid, cfg_.input_dim, rng));
    const std::size_t head = cfg_.use_decoder ? cfg_.input_dim : cfg_.implicit_dim;
    params_.pair_bilinear = Parameter("pair.bilinear", Matrix(head, head));
    params_.pair_gain = Parameter("pair.gain", Matrix(1, 1, cfg_.strength_gain_init));
    params_.pair_bias = Parameter("pair.bias", Matrix(1, 1, -0.5 * cfg_.strength_gain_init));
    params_.emotion_weight = Parameter("emotion.weight", Matrix(head, 1));
    params_.emotion_spread = Parameter("emotion.spread", Matrix(1, 1));
    params_.emotion_bias = Parameter("emotion.bias", Matrix(1, 1));
}

VgaeModel::VgaeModel(const VgaeModel& other) : cfg_(other.cfg_), params_(other.params_) {
    for (Parameter* p : params_.all()) *p = p->clone();
}

VgaeModel& VgaeModel::operator=(const VgaeModel& other) {
    if (this != &other) {
        VgaeModel tmp(other);
        *this = std::move(tmp);
    }
    return *this;
}

Var VgaeModel::attention(const Var& h, std::size_t layer, const Matrix& allow) const {
    const auto& p = params_.encoder.at(layer);
    if (cfg_.attention == AttentionMode::least_squares) return ridge_attention(matmul(h, p.key.var()), allow, cfg_.ridge);
    // logits(t, i) = h_i . w_row + h_t . w_col, i.e. source term per column, target term per row.
    const Var src = transpose(matmul(h, p.w_row.var()));  // 1 x N
    const Var dst = matmul(h, p.w_col.var());             // N x 1
    const Var logits = add(matmul(dst, constant(Matrix(1, h.rows(), 1.0))), src);
    if (cfg_.attention == AttentionMode::softmax) return softmax_rows(leaky_relu(logits, cfg_.leaky_slope), &allow);
    return leaky_ratio_rows(logits, allow, cfg_.leaky_slope, cfg_.ratio_clamp);
}

Var VgaeModel::encode_var(const Var& h, const Matrix& allow, const Matrix& row_mask, const ForwardOptions& opt,
                          Var* strength, std::vector<Var>* hidden) const {
    Var x = h;
    Var a;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        a = attention(x, l, allow);
        x = mul(elu(matmul(sub(x, matmul(a, x)), params_.encoder[l].weight.var())), constant(row_mask));
        if (opt.training && cfg_.dropout > 0.0 && opt.rng)
            x = apply_mask(x, dropout_mask(x.rows(), x.cols(), cfg_.dropout, *opt.rng));
        if (hidden) hidden->push_back(x);
    }
    if (strength) *strength = a;
    return mul(matmul(x, params_.encoder_out.var()), constant(row_mask));
}

Var VgaeModel::decode_var(const Var& z, const Var& strength, const Matrix& row_mask, const ForwardOptions& opt) const {
    const Var t = unit_lower_inverse(strength);
    Var x = z;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        x = mul(elu(matmul(matmul(t, x), params_.decoder[l].var())), constant(row_mask));
        if (opt.training && cfg_.dropout > 0.0 && opt.rng)
            x = apply_mask(x, dropout_mask(x.rows(), x.cols(), cfg_.dropout, *opt.rng));
    }
    return mul(matmul(x, params_.decoder_out.var()), constant(row_mask));
}

Var VgaeModel::emotion_var(const Var& rows) const {
    require(rows.cols() == params_.emotion_weight.value().rows(),
            "emotion probe expects width " + std::to_string(params_.emotion_weight.value().rows()) + ", got " +
                std::to_string(rows.cols()));
    const double inv = 1.0 / static_cast<double>(rows.cols());
    const Var centered = sub(rows, scale(sum_rows(rows), inv));
    const Var spread = scale(sum_rows(square(centered)), inv);
    return add(add(matmul(rows, params_.emotion_weight.var()), mul(spread, params_.emotion_spread.var())),
               params_.emotion_bias.var());
}

Var VgaeModel::pair_logits_var(const Var& h_hat, const Var& strength) const {
    const Var q = l2_normalize_rows(h_hat);
    const Var bil = matmul(matmul(q, params_.pair_bilinear.var()), transpose(q));
    return add(add(bil, mul(strength, params_.pair_gain.var())), params_.pair_bias.var());
}

ForwardTrace VgaeModel::forward(const Matrix& h, const std::vector<bool>& valid, const ForwardOptions& opt) const {
    require(h.cols() == cfg_.input_dim, "forward: embedding width " + std::to_string(h.cols()) + " differs from model input " +
                                            std::to_string(cfg_.input_dim));
    require(h.rows() > 0, "forward: empty dialogue");
    require(valid.empty() || valid.size() == h.rows(), "forward: mask length differs from utterance count");
    require(count_valid(h.rows(), valid) > 0, "forward: all utterances are padding");
    require(!opt.sample || opt.rng, "forward: sampling requires an rng");
    const std::size_t n = h.rows();
    const Matrix allow = allow_mask(n, valid);
    const Matrix rmask = row_mask_from(n, valid);
    Matrix hin = h;
    for (std::size_t i = 0; i < n; ++i)
        if (rmask(i, 0) == 0.0)
            for (double& v : hin.row(i)) v = 0.0;

    ForwardTrace tr;
    tr.e_hat = encode_var(constant(hin), allow, rmask, opt, &tr.strength, &tr.hidden);

    if (cfg_.latent == LatentMode::gaussian) {
        tr.z = tr.e_hat;
        if (opt.sample) {
            Matrix eps(n, cfg_.implicit_dim);
            for (double& v : eps.data()) v = opt.rng->normal();
            tr.z = mul(add(tr.e_hat, constant(std::move(eps))), constant(rmask));
        }
    } else {
        Var logits = tr.e_hat;
        if (opt.sample) {
            Matrix g(n, cfg_.implicit_dim);
            for (double& v : g.data()) v = opt.rng->gumbel();
            logits = scale(add(tr.e_hat, constant(std::move(g))), 1.0 / cfg_.temperature);
        }
        tr.log_z = log_softmax_rows(logits);
        tr.z = mul(exp(tr.log_z), constant(rmask));
    }

    tr.h_hat = cfg_.use_decoder ? decode_var(tr.z, tr.strength, rmask, opt) : tr.e_hat;
    tr.pair_logits = pair_logits_var(tr.h_hat, tr.strength);
    tr.emotion_h_hat = emotion_var(tr.h_hat);
    if (cfg_.implicit_dim == params_.emotion_weight.value().rows()) tr.emotion_e_hat = emotion_var(tr.e_hat);
    return tr;
}

std::uint64_t VgaeModel::parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Parameter* p : params_.all())
        for (double v : p->value().data()) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xFF;
                h *= 0x100000001b3ULL;
            }
        }
    return h;
}

CausalStrength attention_matrix(const Matrix& h, const VgaeModel& model, std::size_t layer, const std::vector<bool>& valid) {
    require(layer < model.config().layers, "attention_matrix: layer out of range");
    require(count_valid(h.rows(), valid) > 0, "attention_matrix: all utterances are padding");
    const Matrix allow = allow_mask(h.rows(), valid);
    Matrix a = model.attention(constant(h), layer, allow).value();
    return CausalStrength(std::move(a));
}

Matrix encoder_layer(const Matrix& h, const CausalStrength& a, const Matrix& w) {
    require(a.n() == h.rows(), "encoder_layer: strength/embedding row mismatch");
    require(h.cols() == w.rows(), "encoder_layer: weight rows differ from embedding width");
    return activate(matmul(h - matmul(a.weights(), h), w), Activation::elu);
}

EncodeResult encode(const Matrix& h, const VgaeModel& model, const std::vector<bool>& valid) {
    ForwardOptions opt;
    const ForwardTrace tr = model.forward(h, valid, opt);
    EncodeResult r;
    r.causal_strength = CausalStrength(tr.strength.value());
    r.latent = sample_latent(tr.e_hat.value(), model.config().latent, model.config().temperature, nullptr);
    for (const Var& v : tr.hidden) r.hidden.push_back(v.value());
    return r;
}

LatentPosterior sample_latent(const Matrix& e_hat, LatentMode mode, double temperature, SplitMix64* rng) {
    LatentPosterior p;
    p.mean = e_hat;
    p.mode = mode;
    p.temperature = temperature;
    if (mode == LatentMode::gaussian) {
        p.sample = e_hat;
        if (rng)
            for (double& v : p.sample.data()) v += rng->normal();
        return p;
    }
    require(temperature > 0.0, "sample_latent: temperature must be positive");
    Matrix logits = e_hat;
    if (rng) {
        for (double& v : logits.data()) v = (v + rng->gumbel()) / temperature;
    }
    p.sample = activate(logits, Activation::softmax_row);
    return p;
}

Matrix decode(const Matrix& z, const CausalStrength& a, const VgaeModel& model) {
    require(z.rows() == a.n(), "decode: latent/strength row mismatch");
    require(z.cols() == model.config().implicit_dim, "decode: latent width differs from model");
    const Matrix rmask(z.rows(), 1, 1.0);
    return model.decode_var(constant(z), constant(a.weights()), rmask, {}).value();
}

TaskOutputs task_heads(const Matrix& h_hat, const CausalStrength& a, const VgaeModel& model) {
    require(h_hat.rows() == a.n(), "task_heads: row mismatch");
    TaskOutputs out;
    const Matrix logits = model.pair_logits_var(constant(h_hat), constant(a.weights())).value();
    out.pair_scores = Matrix(a.n(), a.n());
    for (std::size_t i = 0; i < a.n(); ++i)
        for (std::size_t j = 0; j < i; ++j) out.pair_scores(i, j) = sigmoid(logits(i, j));
    out.emotion_logits = model.emotion_var(constant(h_hat)).value();
    return out;
}

Var concrete_log_density(const Var& logits, const Var& log_z, double temperature) {
    require(logits.value().same_shape(log_z.value()), "concrete_log_density: shape mismatch");
    const double k = static_cast<double>(logits.cols());
    const double c = std::lgamma(k) + (k - 1.0) * std::log(temperature);
    const Var linear = sum_rows(sub(logits, scale(log_z, temperature + 1.0)));
    const Var lse = logsumexp_rows(sub(logits, scale(log_z, temperature)));
    return add_scalar(sub(linear, scale(lse, k)), c);
}

Var normal_log_density(const Var& z) {
    const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(z.cols());
    return add_scalar(scale(sum_rows(square(z)), -0.5), c);
}

ElboTerms elbo_loss(const Var& h, const Var& h_hat, const Var& e_hat, const Var& z, const Var& log_z, LatentMode mode,
                    double temperature, double beta, const std::vector<bool>& valid) {
    require(h.value().same_shape(h_hat.value()), "elbo_loss: reconstruction shape " + h_hat.value().shape_string() +
                                                     " differs from target " + h.value().shape_string());
    require(e_hat.value().same_shape(z.value()), "elbo_loss: latent shapes differ");
    const std::size_t n = h.rows();
    const Matrix rmask = row_mask_from(n, valid);
    const auto nv = static_cast<double>(count_valid(n, valid));
    require(nv > 0, "elbo_loss: no valid rows");
    ElboTerms t;
    const Var diff = mul(sub(h, h_hat), constant(rmask));
    t.mse = scale(sum(square(diff)), 1.0 / (nv * static_cast<double>(h.cols())));
    const double elems = nv * static_cast<double>(e_hat.cols());
    if (mode == LatentMode::gaussian) {
        t.kl = scale(sum(square(mul(e_hat, constant(rmask)))), 0.5 / elems);
    } else {
        require(static_cast<bool>(log_z), "elbo_loss: gumbel mode needs log z");
        const Var per_row = sub(concrete_log_density(e_hat, log_z, temperature), normal_log_density(z));
        t.kl = scale(sum(mul(per_row, constant(rmask))), 1.0 / elems);
    }
    t.total = add(t.mse, scale(t.kl, beta));
    return t;
}

double elbo_loss(const Matrix& h, const Matrix& h_hat, const LatentPosterior& latent, double beta) {
    Var log_z;
    if (latent.mode == LatentMode::gumbel_softmax) {
        Matrix lz = latent.sample;
        for (double& v : lz.data()) {
            require(v > 0.0, "elbo_loss: gumbel sample must be positive");
            v = std::log(v);
        }
        log_z = constant(std::move(lz));
    }
    return elbo_loss(constant(h), constant(h_hat), constant(latent.mean), constant(latent.sample), log_z, latent.mode,
                     latent.temperature, beta)
        .total.value()(0, 0);
}

std::string config_to_json(const ModelConfig& c) {
    nlohmann::json j{{"input_dim", c.input_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"implicit_dim", c.implicit_dim},
                     {"layers", c.layers},
                     {"attention", to_string(c.attention)},
                     {"ridge", c.ridge},
                     {"leaky_slope", c.leaky_slope},
                     {"ratio_clamp", c.ratio_clamp},
                     {"latent", to_string(c.latent)},
                     {"temperature", c.temperature},
                     {"dropout", c.dropout},
                     {"use_decoder", c.use_decoder},
                     {"strength_gain_init", c.strength_gain_init},
                     {"init", to_string(c.init)},
                     {"init_noise", c.init_noise}};
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model config: ") + e.what());
    }
    if (!j.is_object()) throw DataError("model config must be an object");
    static const std::set<std::string> known{"input_dim", "hidden_dim", "implicit_dim", "layers", "attention",
                                             "ridge", "leaky_slope", "ratio_clamp", "latent", "temperature",
                                             "dropout", "use_decoder", "strength_gain_init", "init", "init_noise"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw DataError("model config: unknown key '" + k + "'");
    ModelConfig c;
    try {
        c.input_dim = j.value("input_dim", c.input_dim);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.implicit_dim = j.value("implicit_dim", c.implicit_dim);
        c.layers = j.value("layers", c.layers);
        c.attention = attention_mode_from_string(j.value("attention", to_string(c.attention)));
        c.ridge = j.value("ridge", c.ridge);
        c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
        c.ratio_clamp = j.value("ratio_clamp", c.ratio_clamp);
        c.latent = latent_mode_from_string(j.value("latent", to_string(c.latent)));
        c.temperature = j.value("temperature", c.temperature);
        c.dropout = j.value("dropout", c.dropout);
        c.use_decoder = j.value("use_decoder", c.use_decoder);
        c.strength_gain_init = j.value("strength_gain_init", c.strength_gain_init);
        c.init = init_scheme_from_string(j.value("init", to_string(c.init)));
        c.init_noise = j.value("init_noise", c.init_noise);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

namespace {

constexpr char kMagic[8] = {'C', 'S', 'C', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

std::string get_string(std::istream& is) {
    const std::uint64_t len = get_u64(is);
    if (len > (1u << 24)) throw DataError("checkpoint: implausible string length");
    std::string s(len, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint: truncated file");
    return s;
}

}  // namespace

void save_checkpoint(const VgaeModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kMagic, 8);
    put_u64(os, kVersion);
    const std::string cfg = config_to_json(model.config());
    put_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const auto params = model.params().all();
    put_u64(os, params.size());
    for (const Parameter* p : params) {
        put_u64(os, p->name().size());
        os.write(p->name().data(), static_cast<std::streamsize>(p->name().size()));
        put_u64(os, p->value().rows());
        put_u64(os, p->value().cols());
        for (double v : p->value().data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

VgaeModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) throw DataError("checkpoint: bad magic in " + path.string());
    const std::uint64_t version = get_u64(is);
    if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    VgaeModel model(config_from_json(get_string(is)));
    auto params = model.params().all();
    const std::uint64_t count = get_u64(is);
    if (count != params.size()) throw DataError("checkpoint: tensor count does not match configuration");
    for (Parameter* p : params) {
        const std::string name = get_string(is);
        if (name != p->name()) throw DataError("checkpoint: expected tensor '" + p->name() + "', found '" + name + "'");
        const std::uint64_t r = get_u64(is), c = get_u64(is);
        if (r != p->value().rows() || c != p->value().cols())
            throw DataError("checkpoint: tensor '" + name + "' has shape " + std::to_string(r) + "x" + std::to_string(c) +
                            ", expected " + p->value().shape_string());
        for (double& v : p->value().data()) v = std::bit_cast<double>(get_u64(is));
    }
    return model;
}

}  // namespace convscm
