#include "convscm/error.hpp"
#include "convscm/model.hpp"
#include "convscm/training.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace convscm;
namespace ad = convscm::ad;

namespace {

ModelConfig small_config(AttentionMode mode = AttentionMode::least_squares, std::size_t d = 6) {
    ModelConfig c;
    c.input_dim = d;
    c.implicit_dim = d;
    c.hidden_dim = 2 * d + 2;
    c.attention = mode;
    c.dropout = 0.0;
    return c;
}

double row_sum(const Matrix& m, std::size_t r) {
    double s = 0.0;
    for (double v : m.row(r)) s += v;
    return s;
}

std::filesystem::path temp_file(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "convscm_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation and JSON") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = ModelConfig{};
    c.temperature = 0.0;
    c.latent = LatentMode::gumbel_softmax;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = ModelConfig{};
    c.attention = AttentionMode::leaky_ratio;
    c.latent = LatentMode::gumbel_softmax;
    c.use_decoder = false;
    const ModelConfig back = config_from_json(config_to_json(c));
    CHECK(back.attention == AttentionMode::leaky_ratio);
    CHECK(back.latent == LatentMode::gumbel_softmax);
    CHECK_FALSE(back.use_decoder);
    CHECK_THROWS_AS(config_from_json(R"({"hiden_dim": 3})"), DataError);
    CHECK_THROWS_AS(config_from_json(R"({"attention": "cosine"})"), ContractError);
}

TEST_CASE("attention matrix: single utterance and symmetry") {
    const VgaeModel m(small_config(AttentionMode::softmax));
    CHECK(attention_matrix(Matrix(1, 6, 1.0), m, 0).weights() == Matrix(1, 1));

    VgaeModel flat(small_config(AttentionMode::softmax));
    flat.params().encoder[0].w_row.value() = Matrix(6, 1);
    flat.params().encoder[0].w_col.value() = Matrix(6, 1);
    SplitMix64 rng(1);
    const Matrix a = attention_matrix(oracle::random_matrix(4, 6, rng), flat, 0).weights();
    for (std::size_t i = 0; i < 3; ++i) CHECK(a(3, i) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("normalized attention rows sum to one and stay strictly lower") {
    SplitMix64 rng(2);
    for (AttentionMode mode : {AttentionMode::softmax, AttentionMode::leaky_ratio}) {
        const VgaeModel m(small_config(mode), 3);
        for (int trial = 0; trial < 100; ++trial) {
            const auto n = static_cast<std::size_t>(rng.uniform_int(1, 9));
            Matrix h = oracle::random_matrix(n, 6, rng);
            if (mode == AttentionMode::leaky_ratio)
                for (double& v : h.data()) v = std::abs(v);  // keeps the literal ratio's denominator away from 0
            const Matrix a = attention_matrix(h, m, 0).weights();
            CHECK(is_strictly_lower(a));
            for (std::size_t r = 1; r < n; ++r) CHECK(std::abs(row_sum(a, r) - 1.0) < 1e-9);
        }
    }
    const VgaeModel ls(small_config(AttentionMode::least_squares));
    CHECK(is_strictly_lower(attention_matrix(oracle::random_matrix(7, 6, rng), ls, 0).weights()));
}

TEST_CASE("padding is excluded from attention and outputs") {
    SplitMix64 rng(4);
    for (AttentionMode mode : {AttentionMode::least_squares, AttentionMode::softmax}) {
        const VgaeModel m(small_config(mode), 5);
        Matrix h = oracle::random_matrix(6, 6, rng);
        const std::vector<bool> valid{true, true, true, true, false, false};
        const EncodeResult r1 = encode(h, m, valid);
        const Matrix& a = r1.causal_strength.weights();
        for (std::size_t i = 0; i < 6; ++i) {
            for (std::size_t j = 4; j < 6; ++j) {
                CHECK(a(i, j) == 0.0);
                CHECK(a(j, i) == 0.0);
            }
        }
        // reorder the padded tail: valid outputs are unchanged
        for (std::size_t c = 0; c < 6; ++c) std::swap(h(4, c), h(5, c));
        const EncodeResult r2 = encode(h, m, valid);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t c = 0; c < 6; ++c) CHECK(r1.latent.mean(i, c) == doctest::Approx(r2.latent.mean(i, c)).epsilon(1e-12));
        CHECK_THROWS_AS(encode(h, m, std::vector<bool>(6, false)), ContractError);
    }
}

TEST_CASE("encoder layer") {
    SplitMix64 rng(6);
    const Matrix h = oracle::random_matrix(4, 5, rng);
    CHECK(encoder_layer(h, CausalStrength(4), Matrix::identity(5)) == activate(h, Activation::elu));
    const Matrix w = oracle::random_matrix(5, 3, rng);
    const CausalStrength a(oracle::random_strictly_lower(4, rng, 0.0, 0.5));
    const Matrix out = encoder_layer(h, a, w);
    CHECK(out.rows() == 4);
    CHECK(out.cols() == 3);
    CHECK_THROWS_AS(encoder_layer(h, CausalStrength(3), w), ContractError);

    // gradient with respect to the layer weight
    Matrix wv = w;
    const Matrix coeff = oracle::random_matrix(4, 3, rng);
    auto f = [&](const ad::Var& wvar) {
        const ad::Var x = ad::constant(h);
        return ad::sum(ad::mul(ad::elu(ad::matmul(ad::sub(x, ad::matmul(ad::constant(a.weights()), x)), wvar)), ad::constant(coeff)));
    };
    const ad::Var wvar = ad::variable(wv);
    ad::backward(f(wvar));
    const Matrix g = wvar.grad();
    std::vector<std::size_t> coords(wv.size());
    for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
    CHECK(oracle::fd_max_rel_error(wv, g, [&] { return f(ad::constant(wv)).value()(0, 0); }, coords) < 1e-4);
}

TEST_CASE("encode is deterministic") {
    SplitMix64 rng(7);
    const VgaeModel m(small_config(), 9);
    const Matrix h = oracle::random_matrix(5, 6, rng);
    const EncodeResult a = encode(h, m), b = encode(h, m);
    CHECK(a.latent.mean == b.latent.mean);
    CHECK(a.causal_strength.weights() == b.causal_strength.weights());
    CHECK(a.hidden.size() == 1);
}

TEST_CASE("latent sampling") {
    SplitMix64 rng(8);
    const Matrix e = oracle::random_matrix(4, 5, rng);
    CHECK(sample_latent(e, LatentMode::gaussian, 1.0, nullptr).sample == e);
    const Matrix soft = sample_latent(e, LatentMode::gumbel_softmax, 1.0, nullptr).sample;
    CHECK(soft == activate(e, Activation::softmax_row));
    SplitMix64 r1(3), r2(3);
    const Matrix g1 = sample_latent(e, LatentMode::gumbel_softmax, 0.5, &r1).sample;
    const Matrix g2 = sample_latent(e, LatentMode::gumbel_softmax, 0.5, &r2).sample;
    CHECK(g1 == g2);
    for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(row_sum(g1, r) - 1.0) < 1e-9);
    SplitMix64 r3(3);
    CHECK_FALSE(sample_latent(e, LatentMode::gaussian, 1.0, &r3).sample == e);
    CHECK_THROWS_AS(sample_latent(e, LatentMode::gumbel_softmax, 0.0, &r1), ContractError);
}

TEST_CASE("decoder") {
    ModelConfig c = small_config();
    c.hidden_dim = 6;
    VgaeModel m(c, 1);
    m.params().decoder[0].value() = Matrix::identity(6);
    SplitMix64 rng(9);
    const Matrix proj = oracle::random_matrix(6, 6, rng);
    m.params().decoder_out.value() = proj;
    const Matrix z = oracle::random_matrix(4, 6, rng);
    CHECK((decode(z, CausalStrength(4), m) - matmul(activate(z, Activation::elu), proj)).max_abs() < 1e-12);

    Matrix chain(4, 4);
    for (std::size_t i = 1; i < 4; ++i) chain(i, i - 1) = 0.5;
    const Matrix expect = matmul(activate(oracle::topological_substitution(chain, z), Activation::elu), proj);
    CHECK((decode(z, CausalStrength(chain), m) - expect).max_abs() < 1e-10);

    // output width follows the embedding width, not the latent width
    ModelConfig wide = small_config();
    wide.implicit_dim = 3;
    const VgaeModel w(wide, 2);
    CHECK(decode(oracle::random_matrix(5, 3, rng), CausalStrength(5), w).cols() == 6);
}

TEST_CASE("decode of the encoder mean stays finite") {
    const VgaeModel m(small_config(), 10);
    SplitMix64 rng(10);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 8));
        const EncodeResult r = encode(oracle::random_matrix(n, 6, rng, 3.0), m);
        CHECK(decode(r.latent.mean, r.causal_strength, m).all_finite());
    }
}

TEST_CASE("elbo examples") {
    SplitMix64 rng(11);
    const Matrix h = oracle::random_matrix(3, 4, rng);
    LatentPosterior zero{Matrix(3, 5), Matrix(3, 5), LatentMode::gaussian, 1.0};
    CHECK(elbo_loss(h, h, zero, 1.0) == 0.0);
    LatentPosterior one{Matrix(1, 2), Matrix(1, 2), LatentMode::gaussian, 1.0};
    CHECK(elbo_loss(Matrix{{1, 2}}, Matrix{{0, 0}}, one, 0.0) == doctest::Approx(2.5));
    LatentPosterior shifted{Matrix{{2, 0}}, Matrix{{2, 0}}, LatentMode::gaussian, 1.0};
    CHECK(elbo_loss(Matrix{{1, 2}}, Matrix{{1, 2}}, shifted, 1.0) == doctest::Approx(0.5 * 4.0 / 2.0));
    CHECK_THROWS_AS(elbo_loss(h, Matrix(2, 4), zero, 1.0), ContractError);
}

TEST_CASE("gumbel KL matches the two log densities") {
    SplitMix64 rng(12);
    const Matrix logits = oracle::random_matrix(3, 4, rng);
    const double tau = 0.7;
    // Concrete density at a point of the simplex, written out directly.
    const Matrix z{{0.1, 0.2, 0.3, 0.4}, {0.25, 0.25, 0.25, 0.25}, {0.7, 0.1, 0.1, 0.1}};
    Matrix logz = z;
    for (double& v : logz.data()) v = std::log(v);
    const double got = ad::sum(concrete_log_density(ad::constant(logits), ad::constant(logz), tau)).value()(0, 0);
    double expect = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
        const double k = 4.0;
        double lse_terms = 0.0;
        std::vector<double> t(4);
        for (std::size_t c = 0; c < 4; ++c) t[c] = logits(r, c) - tau * logz(r, c);
        const double mx = *std::max_element(t.begin(), t.end());
        for (double v : t) lse_terms += std::exp(v - mx);
        double row = std::lgamma(k) + (k - 1.0) * std::log(tau) - k * (mx + std::log(lse_terms));
        for (std::size_t c = 0; c < 4; ++c) row += logits(r, c) - (tau + 1.0) * logz(r, c);
        expect += row;
    }
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
    const double normal = ad::sum(normal_log_density(ad::constant(z))).value()(0, 0);
    double nexp = 0.0;
    for (double v : z.data()) nexp += -0.5 * v * v - 0.5 * std::log(2.0 * std::numbers::pi);
    CHECK(normal == doctest::Approx(nexp).epsilon(1e-12));
}

TEST_CASE("task heads") {
    VgaeModel m(small_config(), 1);
    m.params().pair_gain.value() = Matrix(1, 1);
    m.params().pair_bias.value() = Matrix(1, 1);
    SplitMix64 rng(13);
    const Matrix hh = oracle::random_matrix(4, 6, rng);
    const CausalStrength a(oracle::random_strictly_lower(4, rng, 0.0, 1.0));
    const TaskOutputs out = task_heads(hh, a, m);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(out.pair_scores(i, j) == (j < i ? 0.5 : 0.0));
    CHECK(out.emotion_logits.rows() == 4);
    // the strength term raises scores of stronger edges
    const VgaeModel fresh(small_config(), 1);
    const TaskOutputs s = task_heads(Matrix(3, 6), CausalStrength(Matrix{{0, 0, 0}, {0.9, 0, 0}, {0.1, 0.2, 0}}), fresh);
    CHECK(s.pair_scores(1, 0) > s.pair_scores(2, 0));
}

TEST_CASE("inverse of I - A has a unit diagonal that dominates each column") {
    SplitMix64 rng(14);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(2, 10));
        Matrix a = oracle::random_strictly_lower(n, rng, 0.0, 1.0);
        for (std::size_t i = 1; i < n; ++i) {
            const double s = row_sum(a, i), target = rng.uniform(0.0, 0.999);
            for (double& v : a.row(i)) v *= target / s;
        }
        const Matrix inv = unit_lower_inverse(a);
        for (std::size_t j = 0; j < n; ++j) {
            CHECK(inv(j, j) == 1.0);
            for (std::size_t i = 0; i < n; ++i) CHECK(inv(i, j) <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("full model gradients match finite differences") {
    for (AttentionMode att : {AttentionMode::least_squares, AttentionMode::softmax, AttentionMode::leaky_ratio}) {
        for (LatentMode lat : {LatentMode::gaussian, LatentMode::gumbel_softmax}) {
            CAPTURE(to_string(att));
            CAPTURE(to_string(lat));
            CHECK(gradcheck::full_model_error(lat, att) < 1e-4);
        }
    }
}

TEST_CASE("no-decoder variant gradients") {
    const double err = [] {
        TrainConfig cfg = gradcheck::toy_config(LatentMode::gaussian, AttentionMode::least_squares);
        cfg.model.use_decoder = false;
        VgaeModel model(cfg.model, 4);
        const Dialogue d = gradcheck::toy_dialogue(5, 6, 8);
        const BatchNormalizers norm = batch_normalizers({&d}, cfg);
        auto loss = [&](bool grad) {
            SplitMix64 noise(2);
            LossParts p = dialogue_loss(model, d, cfg, norm, ForwardOptions{false, true, &noise});
            if (grad) ad::backward(p.total);
            return p.total.value()(0, 0);
        };
        for (auto* p : model.params().all()) p->zero_grad();
        loss(true);
        double worst = 0.0;
        for (auto* p : model.params().all()) {
            const Matrix g = p->grad();
            std::vector<std::size_t> coords(g.size());
            for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
            worst = std::max(worst, oracle::fd_max_rel_error(p->value(), g, [&] { return loss(false); }, coords));
        }
        return worst;
    }();
    CHECK(err < 1e-4);
}

TEST_CASE("copies own their parameters") {
    VgaeModel a(small_config(), 3);
    VgaeModel b = a;
    CHECK(a.parameter_hash() == b.parameter_hash());
    b.params().pair_gain.value()(0, 0) += 1.0;
    CHECK(a.parameter_hash() != b.parameter_hash());
    CHECK(a.params().pair_gain.value()(0, 0) == 8.0);
}

TEST_CASE("checkpoint round trip") {
    ModelConfig c = small_config(AttentionMode::softmax);
    c.latent = LatentMode::gumbel_softmax;
    const VgaeModel m(c, 21);
    const auto path = temp_file("model.ckpt");
    save_checkpoint(m, path);
    const VgaeModel back = load_checkpoint(path);
    CHECK(back.parameter_hash() == m.parameter_hash());
    CHECK(back.config().attention == AttentionMode::softmax);
    CHECK(back.config().latent == LatentMode::gumbel_softmax);
    SplitMix64 rng(1);
    const Matrix h = oracle::random_matrix(4, 6, rng);
    CHECK(encode(h, back).latent.mean == encode(h, m).latent.mean);

    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
    CHECK_THROWS_AS(load_checkpoint(temp_file("missing.ckpt")), DataError);
}

}  // TEST_SUITE
