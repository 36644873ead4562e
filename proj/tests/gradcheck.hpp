#pragma once

#include "convscm/training.hpp"
#include "oracles.hpp"

namespace gradcheck {

using namespace convscm;

inline Dialogue toy_dialogue(std::size_t n, std::size_t d, std::uint64_t seed) {
    SplitMix64 rng(seed);
    Dialogue dl;
    dl.id = "toy";
    for (std::size_t i = 0; i < n; ++i) dl.utterances.push_back(Utterance{static_cast<int>(i % 2) + 1, i % 2 == 1, std::nullopt});
    dl.embeddings = oracle::random_matrix(n, d, rng);
    for (std::size_t i = 1; i < n; i += 2) dl.cause_pairs.emplace_back(i, i - 1);
    return dl;
}

inline TrainConfig toy_config(LatentMode latent, AttentionMode attention, std::size_t d = 6) {
    TrainConfig cfg;
    cfg.model.input_dim = d;
    cfg.model.implicit_dim = d;
    cfg.model.hidden_dim = 2 * d + 1;
    cfg.model.layers = 1;
    cfg.model.dropout = 0.0;
    cfg.model.latent = latent;
    cfg.model.attention = attention;
    cfg.model.init_noise = 0.3;  // move off the symmetric start
    return cfg;
}

// Max relative error between analytic and central-difference gradients of the full training loss,
// over every parameter coordinate. Latent noise is frozen by reseeding per evaluation.
inline double full_model_error(LatentMode latent, AttentionMode attention, std::uint64_t seed = 17) {
    const TrainConfig cfg = toy_config(latent, attention);
    VgaeModel model(cfg.model, seed);
    SplitMix64 perturb(seed + 1);
    for (ad::Parameter* p : model.params().all())
        for (double& v : p->value().data()) v += perturb.normal(0.0, 0.05);
    const Dialogue d = toy_dialogue(4, 6, seed + 2);
    const BatchNormalizers norm = batch_normalizers({&d}, cfg);
    auto loss = [&](bool with_grad) {
        SplitMix64 noise(seed + 3);
        ForwardOptions opt{false, true, &noise};
        LossParts parts = dialogue_loss(model, d, cfg, norm, opt);
        if (with_grad) ad::backward(parts.total);
        return parts.total.value()(0, 0);
    };
    for (ad::Parameter* p : model.params().all()) p->zero_grad();
    loss(true);
    double worst = 0.0;
    for (ad::Parameter* p : model.params().all()) {
        const Matrix analytic = p->grad();
        std::vector<std::size_t> coords(p->value().size());
        for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
        worst = std::max(worst, oracle::fd_max_rel_error(p->value(), analytic, [&] { return loss(false); }, coords));
    }
    return worst;
}

}  // namespace gradcheck
