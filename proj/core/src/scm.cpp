#include "convscm/scm.hpp"

#include "convscm/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace convscm {

CausalStrength::CausalStrength(Matrix weights) : w_(std::move(weights)) {
    require(w_.rows() == w_.cols(), "CausalStrength: matrix is not square (" + w_.shape_string() + ")");
    require(is_strictly_lower(w_), "CausalStrength: matrix is not strictly lower triangular");
}

void CausalStrength::set(std::size_t effect, std::size_t cause, double v) {
    require(effect < n() && cause < effect, "CausalStrength::set: cause must precede effect");
    w_(effect, cause) = v;
}

std::string to_string(SkeletonTag tag) {
    switch (tag) {
    case SkeletonTag::I: return "I";
    case SkeletonTag::II: return "II";
    case SkeletonTag::III: return "III";
    case SkeletonTag::IV: return "IV";
    }
    return "?";
}

SkeletonTag skeleton_from_string(const std::string& s) {
    if (s == "I") return SkeletonTag::I;
    if (s == "II") return SkeletonTag::II;
    if (s == "III") return SkeletonTag::III;
    if (s == "IV") return SkeletonTag::IV;
    throw ContractError("unknown skeleton tag '" + s + "'");
}

bool Dialogue::has_pair(std::size_t effect, std::size_t cause) const {
    return std::binary_search(cause_pairs.begin(), cause_pairs.end(), CausePair{effect, cause});
}

std::vector<double> Dialogue::emotion_flags() const {
    std::vector<double> f(utterances.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = utterances[i].emotion.value_or(false) ? 1.0 : 0.0;
    return f;
}

void Dialogue::validate() const {
    const std::size_t n = utterances.size();
    const std::string who = "dialogue '" + id + "': ";
    require(embeddings.rows() == n, who + "embedding rows (" + std::to_string(embeddings.rows()) +
                                        ") differ from utterance count (" + std::to_string(n) + ")");
    require(embeddings.all_finite(), who + "non-finite embedding");
    for (const auto& [effect, cause] : cause_pairs) {
        require(effect < n, who + "pair effect index out of range");
        require(cause < effect, who + "cause must precede effect");
    }
    require(std::is_sorted(cause_pairs.begin(), cause_pairs.end()) &&
                std::adjacent_find(cause_pairs.begin(), cause_pairs.end()) == cause_pairs.end(),
            who + "cause pairs must be sorted and unique");
    if (implicit_causes) require(implicit_causes->same_shape(embeddings), who + "implicit causes shape differs from embeddings");
    if (true_strength) {
        require(true_strength->rows() == n && true_strength->cols() == n, who + "causal strength must be N x N");
        require(is_strictly_lower(*true_strength), who + "causal strength must be strictly lower triangular");
    }
}

void SyntheticSpec::validate() const {
    auto ordered = [](const Range& r) { return r.lo <= r.hi; };
    require(dim > 0, "SyntheticSpec: dim must be positive");
    require(stddev >= 0.0, "SyntheticSpec: stddev must be non-negative");
    require(ordered(cause_weight) && ordered(non_cause_weight) && ordered(noise), "SyntheticSpec: ranges must be ordered");
    require(train_size > 0 && eval_size > 0 && test_size > 0, "SyntheticSpec: split sizes must be positive");
    require(templates.min_length >= 1 && templates.min_length <= templates.max_length,
            "SyntheticSpec: template lengths must be ordered and positive");
    require(templates.emotion_probability >= 0.0 && templates.emotion_probability <= 1.0,
            "SyntheticSpec: emotion probability outside [0,1]");
    require(templates.min_pairs <= templates.max_pairs, "SyntheticSpec: pair counts must be ordered");
}

Matrix forward_generate(const CausalStrength& a, const Matrix& e) {
    require(a.n() == e.rows(), "forward_generate: strength is " + a.weights().shape_string() + " but causes have " +
                                   std::to_string(e.rows()) + " rows");
    return unit_lower_solve(a.weights(), e);
}

StructureTemplate sample_template(const TemplateDistribution& dist, SplitMix64& rng) {
    StructureTemplate t;
    const auto n = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(dist.min_length), static_cast<std::int64_t>(dist.max_length)));
    t.emotion.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.emotion[i] = rng.bernoulli(dist.emotion_probability);
    for (std::size_t i = 1; i < n; ++i) {
        if (!t.emotion[i]) continue;
        const auto want = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(dist.min_pairs), static_cast<std::int64_t>(dist.max_pairs)));
        std::vector<std::size_t> causes(i);
        for (std::size_t j = 0; j < i; ++j) causes[j] = j;
        rng.shuffle(causes);
        causes.resize(std::min(want, i));
        for (std::size_t j : causes) t.pairs.emplace_back(i, j);
    }
    std::sort(t.pairs.begin(), t.pairs.end());
    return t;
}

std::vector<StructureTemplate> sample_templates(const TemplateDistribution& dist, std::size_t count, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<StructureTemplate> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) out.push_back(sample_template(dist, rng));
    return out;
}

Dialogue generate_synthetic_dialogue(const StructureTemplate& tmpl, const SyntheticSpec& spec, std::uint64_t seed,
                                     std::string id) {
    const std::size_t n = tmpl.size();
    for (const auto& [effect, cause] : tmpl.pairs) {
        require(effect < n, "generate_synthetic_dialogue: pair effect index out of range");
        require(cause < effect, "generate_synthetic_dialogue: template pair (" + std::to_string(effect) + ", " +
                                    std::to_string(cause) + ") has a cause that does not precede its effect");
    }
    SplitMix64 rng(seed);
    Dialogue d;
    d.id = std::move(id);
    d.utterances.resize(n);
    Matrix e(n, spec.dim);
    for (std::size_t i = 0; i < n; ++i) {
        d.utterances[i].speaker = static_cast<int>(i % 2) + 1;
        d.utterances[i].emotion = static_cast<bool>(tmpl.emotion[i]);
        const double mu = tmpl.emotion[i] ? spec.emotion_mean : spec.non_emotion_mean;
        for (double& v : e.row(i)) v = rng.normal(mu, spec.stddev);
    }
    // Unlabeled weights only enter emotional effects; labeled pairs are always drawn from the cause range.
    CausalStrength a(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!tmpl.emotion[i]) continue;
        for (std::size_t j = 0; j < i; ++j) a.set(i, j, rng.uniform(spec.non_cause_weight.lo, spec.non_cause_weight.hi));
    }
    for (const auto& [effect, cause] : tmpl.pairs) a.set(effect, cause, rng.uniform(spec.cause_weight.lo, spec.cause_weight.hi));

    Matrix h = forward_generate(a, e);
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = rng.uniform(spec.noise.lo, spec.noise.hi);
        for (double& v : h.row(i)) v += xi;
    }
    d.embeddings = std::move(h);
    d.implicit_causes = std::move(e);
    d.true_strength = a.weights();
    d.cause_pairs = tmpl.pairs;
    return d;
}

DatasetSplits generate_synthetic_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t total = spec.train_size + spec.eval_size + spec.test_size;
    const auto templates = sample_templates(spec.templates, total, spec.template_seed);
    DatasetSplits out;
    for (std::size_t k = 0; k < total; ++k) {
        Dialogue d = generate_synthetic_dialogue(templates[k], spec, derive_seed(seed, "synthetic", k), "syn-" + std::to_string(k + 1));
        if (k < spec.train_size)
            out.train.push_back(std::move(d));
        else if (k < spec.train_size + spec.eval_size)
            out.eval.push_back(std::move(d));
        else
            out.test.push_back(std::move(d));
    }
    return out;
}

std::string to_string(Direction d) {
    switch (d) {
    case Direction::x_causes_y: return "x_causes_y";
    case Direction::y_causes_x: return "y_causes_x";
    case Direction::undetermined: return "undetermined";
    }
    return "?";
}

double pearson(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size() && a.size() >= 2, "pearson: need equal-length samples");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

namespace {

// OLS residual is linearly uncorrelated with its regressor by construction, so
// dependence is measured on nonlinear moments as well.
double residual_dependence(std::span<const double> regressor, std::span<const double> target) {
    const std::size_t n = regressor.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += regressor[i];
        my += target[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (regressor[i] - mx) * (target[i] - my);
        sxx += (regressor[i] - mx) * (regressor[i] - mx);
    }
    const double slope = sxy / sxx;
    std::vector<double> r(n), r2(n), xc(n), x2(n);
    for (std::size_t i = 0; i < n; ++i) {
        xc[i] = regressor[i] - mx;
        r[i] = (target[i] - my) - slope * xc[i];
        r2[i] = r[i] * r[i];
        x2[i] = xc[i] * xc[i];
    }
    return std::max({std::abs(pearson(r, xc)), std::abs(pearson(r, x2)), std::abs(pearson(r2, x2))});
}

double variance(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

}  // namespace

ResidualTest residual_direction(std::span<const double> x, std::span<const double> y, double threshold) {
    require(x.size() == y.size(), "residual_direction: samples must be paired");
    require(x.size() >= 30, "residual_direction: need at least 30 samples");
    require(variance(x) > 0.0 && variance(y) > 0.0, "residual_direction: zero-variance input");
    ResidualTest out;
    out.dependence_y_on_x = residual_dependence(x, y);
    out.dependence_x_on_y = residual_dependence(y, x);
    const bool forward_ok = out.dependence_y_on_x < threshold;
    const bool backward_ok = out.dependence_x_on_y < threshold;
    if (forward_ok && !backward_ok) out.direction = Direction::x_causes_y;
    else if (backward_ok && !forward_ok) out.direction = Direction::y_causes_x;
    return out;
}

}  // namespace convscm
