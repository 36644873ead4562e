#include "convscm/evaluation.hpp"

#include "convscm/error.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>

namespace convscm {

std::string to_string(CandidateRule r) {
    switch (r) {
    case CandidateRule::automatic: return "automatic";
    case CandidateRule::emotional_effects: return "emotional_effects";
    case CandidateRule::all_pairs: return "all_pairs";
    }
    return "?";
}

CandidateRule candidate_rule_from_string(const std::string& s) {
    if (s == "automatic") return CandidateRule::automatic;
    if (s == "emotional_effects") return CandidateRule::emotional_effects;
    if (s == "all_pairs") return CandidateRule::all_pairs;
    throw ContractError("unknown candidate rule '" + s + "'");
}

namespace {

bool has_emotion_labels(const Dialogue& d) {
    return std::any_of(d.utterances.begin(), d.utterances.end(), [](const Utterance& u) { return u.emotion.has_value(); });
}

bool effect_allowed(const Dialogue& d, std::size_t i, CandidateRule rule) {
    if (rule == CandidateRule::all_pairs) return true;
    if (rule == CandidateRule::automatic && !has_emotion_labels(d)) return true;
    return d.utterances[i].emotion.value_or(false);
}

}  // namespace

std::vector<CausePair> candidate_pairs(const Dialogue& d, CandidateRule rule) {
    std::vector<CausePair> out;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!effect_allowed(d, i, rule)) continue;
        for (std::size_t j = 0; j < i; ++j) out.emplace_back(i, j);
    }
    return out;
}

Matrix candidate_mask(const Dialogue& d, CandidateRule rule) {
    Matrix m(d.size(), d.size());
    for (const auto& [i, j] : candidate_pairs(d, rule)) m(i, j) = 1.0;
    return m;
}

std::vector<CausePair> predict_pairs(const Matrix& scores, double threshold, const std::vector<bool>* effect_filter) {
    require(scores.rows() == scores.cols(), "predict_pairs: score matrix must be square");
    require(!effect_filter || effect_filter->size() == scores.rows(), "predict_pairs: filter length mismatch");
    std::vector<CausePair> out;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        if (effect_filter && !(*effect_filter)[i]) continue;
        for (std::size_t j = 0; j < i; ++j)
            if (scores(i, j) >= threshold) out.emplace_back(i, j);
    }
    return out;
}

double f1(const PairSet& preds, const PairSet& labels) {
    std::size_t tp = 0;
    for (const auto& p : preds) tp += labels.count(p);
    if (tp == 0) return 0.0;
    const double p = static_cast<double>(tp) / static_cast<double>(preds.size());
    const double r = static_cast<double>(tp) / static_cast<double>(labels.size());
    return 100.0 * 2.0 * p * r / (p + r);
}

DialoguePrediction predict(const VgaeModel& model, const Dialogue& d) {
    const ForwardTrace tr = model.forward(d.embeddings, {}, ForwardOptions{});
    DialoguePrediction p;
    p.strength = tr.strength.value();
    p.e_hat = tr.e_hat.value();
    p.h_hat = tr.h_hat.value();
    p.pair_scores = tr.pair_logits.value();
    for (double& v : p.pair_scores.data()) v = sigmoid(v);
    return p;
}

std::vector<DialoguePrediction> predict_all(const VgaeModel& model, const std::vector<Dialogue>& ds) {
    std::vector<DialoguePrediction> out;
    out.reserve(ds.size());
    for (const auto& d : ds) out.push_back(predict(model, d));
    return out;
}

EceResult ece_scores(const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds, double threshold,
                     CandidateRule rule) {
    require(preds.size() == ds.size(), "ece_scores: prediction count differs from dialogue count");
    PairSet p, l;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        for (const auto& [i, j] : candidate_pairs(ds[k], rule)) {
            if (preds[k].pair_scores(i, j) >= threshold) p.insert({k, i, j});
            if (ds[k].has_pair(i, j)) l.insert({k, i, j});
        }
    }
    EceResult r;
    r.predicted = p.size();
    r.labeled = l.size();
    std::size_t tp = 0;
    for (const auto& x : p) tp += l.count(x);
    r.precision = p.empty() ? 0.0 : 100.0 * static_cast<double>(tp) / static_cast<double>(p.size());
    r.recall = l.empty() ? 0.0 : 100.0 * static_cast<double>(tp) / static_cast<double>(l.size());
    r.f1 = f1(p, l);
    return r;
}

EmotionProbe::EmotionProbe(Matrix weight, double spread, double bias) : weight_(std::move(weight)), spread_(spread), bias_(bias) {
    require(weight_.cols() == 1, "EmotionProbe: weight must be a column");
}

EmotionProbe EmotionProbe::from_model(const VgaeModel& model) {
    const auto& p = model.params();
    return EmotionProbe(p.emotion_weight.value(), p.emotion_spread.value()(0, 0), p.emotion_bias.value()(0, 0));
}

namespace {

double row_spread(std::span<const double> row) {
    double m = 0.0;
    for (double v : row) m += v;
    m /= static_cast<double>(row.size());
    double s = 0.0;
    for (double v : row) s += (v - m) * (v - m);
    return s / static_cast<double>(row.size());
}

}  // namespace

std::vector<double> EmotionProbe::logits(const Matrix& rows) const {
    if (!trained()) throw ContractError("emotion probe is untrained");
    require(rows.cols() == width(), "emotion probe expects width " + std::to_string(width()) + ", got " +
                                        std::to_string(rows.cols()));
    std::vector<double> out(rows.rows());
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        auto row = rows.row(r);
        double s = bias_ + spread_ * row_spread(row);
        for (std::size_t c = 0; c < row.size(); ++c) s += weight_(c, 0) * row[c];
        out[r] = s;
    }
    return out;
}

std::vector<bool> EmotionProbe::predict(const Matrix& rows) const {
    const auto l = logits(rows);
    std::vector<bool> out(l.size());
    for (std::size_t i = 0; i < l.size(); ++i) out[i] = l[i] > 0.0;
    return out;
}

EmotionProbe fit_emotion_probe(const Matrix& rows, const std::vector<bool>& labels, ProbeFitOptions opt) {
    require(rows.rows() == labels.size() && rows.rows() > 0, "fit_emotion_probe: need one label per row");
    const std::size_t n = rows.rows(), d = rows.cols(), k = d + 2;
    Eigen::MatrixXd x(n, k);
    Eigen::VectorXd y(n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) x(r, c) = rows(r, c);
        x(r, d) = row_spread(rows.row(r));
        x(r, d + 1) = 1.0;
        y(r) = labels[r] ? 1.0 : 0.0;
    }
    Eigen::VectorXd w = Eigen::VectorXd::Zero(k);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
        const Eigen::VectorXd z = x * w;
        Eigen::VectorXd p(n), s(n);
        for (std::size_t r = 0; r < n; ++r) {
            p(r) = sigmoid(z(r));
            s(r) = std::max(p(r) * (1.0 - p(r)), 1e-12);
        }
        Eigen::VectorXd grad = x.transpose() * (p - y) + opt.l2 * w;
        grad(d + 1) -= opt.l2 * w(d + 1);  // bias is not penalized
        Eigen::MatrixXd hess = x.transpose() * s.asDiagonal() * x;
        hess.diagonal().array() += opt.l2;
        const Eigen::VectorXd step = hess.ldlt().solve(grad);
        w -= step;
        if (step.norm() < opt.tol * (1.0 + w.norm())) break;
    }
    Matrix weight(d, 1);
    for (std::size_t c = 0; c < d; ++c) weight(c, 0) = w(c);
    return EmotionProbe(std::move(weight), w(d), w(d + 1));
}

IceResult ice_consistency(const Matrix& e_latent, const Matrix& h, const EmotionProbe& probe) {
    if (!probe.trained()) throw ContractError("ice_consistency: probe is untrained");
    require(e_latent.rows() == h.rows(), "ice_consistency: row counts differ");
    const auto ref = probe.predict(h);
    const auto got = probe.predict(e_latent);
    PairSet p, l;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (ref[i]) l.insert({0, i, 0});
        if (got[i]) p.insert({0, i, 0});
    }
    IceResult r;
    r.f1 = f1(p, l);
    r.interpretable = r.f1 > 80.0;
    return r;
}

namespace {

Matrix stack_rows(const std::vector<const Matrix*>& parts) {
    std::size_t n = 0, d = parts.empty() ? 0 : parts.front()->cols();
    for (const Matrix* m : parts) {
        require(m->cols() == d, "stack_rows: widths differ");
        n += m->rows();
    }
    Matrix out(n, d);
    std::size_t r = 0;
    for (const Matrix* m : parts)
        for (std::size_t i = 0; i < m->rows(); ++i, ++r) std::copy(m->row(i).begin(), m->row(i).end(), out.row(r).begin());
    return out;
}

}  // namespace

IceResult ice_scores(const VgaeModel& model, const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds) {
    require(preds.size() == ds.size(), "ice_scores: prediction count differs from dialogue count");
    require(model.config().implicit_dim == model.config().input_dim,
            "ice_scores: implicit width must equal embedding width for a shared probe");
    std::vector<const Matrix*> e, h;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        e.push_back(&preds[k].e_hat);
        h.push_back(&ds[k].embeddings);
    }
    return ice_consistency(stack_rows(e), stack_rows(h), EmotionProbe::from_model(model));
}

std::string to_string(Construction c) {
    switch (c) {
    case Construction::reversal: return "reversal";
    case Construction::chain: return "chain";
    case Construction::common_cause: return "common_cause";
    }
    return "?";
}

Construction construction_from_string(const std::string& s) {
    if (s == "reversal") return Construction::reversal;
    if (s == "chain") return Construction::chain;
    if (s == "common_cause") return Construction::common_cause;
    throw ContractError("unknown construction '" + s + "'");
}

DiscriminabilitySets build_discriminability_sets(const std::vector<Dialogue>& ds, Construction c) {
    DiscriminabilitySets out;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const Dialogue& d = ds[k];
        auto labeled = [&](std::size_t e, std::size_t a) { return d.has_pair(e, a); };
        switch (c) {
        case Construction::reversal:
            for (const auto& [i, j] : d.cause_pairs) {
                out.positive.insert({k, i, j});
                if (!labeled(j, i)) out.negative.insert({k, j, i});
            }
            break;
        case Construction::chain:
            // j -> m -> i with no direct j -> i label.
            for (const auto& [i, m] : d.cause_pairs)
                for (const auto& [m2, j] : d.cause_pairs) {
                    if (m2 != m || labeled(i, j)) continue;
                    out.positive.insert({k, i, m});
                    out.positive.insert({k, m, j});
                    out.negative.insert({k, i, j});
                }
            break;
        case Construction::common_cause:
            // m -> i and m -> j, i != j.
            for (const auto& [i, m] : d.cause_pairs)
                for (const auto& [j, m2] : d.cause_pairs) {
                    if (m2 != m || i == j) continue;
                    out.positive.insert({k, i, m});
                    out.positive.insert({k, j, m});
                    if (!labeled(i, j)) out.negative.insert({k, i, j});
                    if (!labeled(j, i)) out.negative.insert({k, j, i});
                }
            break;
        }
    }
    if (out.positive.empty() || out.negative.empty())
        throw ContractError("discriminability: dataset has no samples for the " + to_string(c) + " construction");
    return out;
}

DiscriminabilityResult discriminability(const std::vector<Matrix>& full_scores, const std::vector<Dialogue>& ds,
                                        Construction c, double threshold) {
    require(full_scores.size() == ds.size(), "discriminability: score count differs from dialogue count");
    const DiscriminabilitySets sets = build_discriminability_sets(ds, c);
    auto score_set = [&](const PairSet& s) {
        PairSet predicted;
        for (const auto& key : s)
            if (full_scores[key.dialogue](key.effect, key.cause) >= threshold) predicted.insert(key);
        return f1(predicted, s);
    };
    DiscriminabilityResult r;
    r.pos_f1 = score_set(sets.positive);
    r.neg_f1 = score_set(sets.negative);
    r.pos_count = sets.positive.size();
    r.neg_count = sets.negative.size();
    return r;
}

std::size_t confounder_errors(const std::vector<Matrix>& pair_scores, const std::vector<Dialogue>& ds, double threshold) {
    require(pair_scores.size() == ds.size(), "confounder_errors: score count differs from dialogue count");
    std::size_t count = 0;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const Dialogue& d = ds[k];
        if (d.skeleton != SkeletonTag::I || d.size() < 4) continue;
        if (pair_scores[k](3, 1) >= threshold && !d.has_pair(3, 1)) ++count;
    }
    return count;
}

Projection pca_project(const Matrix& rows) {
    const std::size_t n = rows.rows(), d = rows.cols();
    require(n >= 2 && d >= 2, "pca_project: need at least two rows and two columns");
    Eigen::MatrixXd x(n, d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) = rows(r, c);
    x.rowwise() -= x.colwise().mean();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd& ev = es.eigenvalues();  // ascending
    const double total = ev.sum();
    const double top = ev(d - 1), second = ev(d - 2);
    if (!(top > 0.0) || second <= 1e-12 * top) throw ContractError("pca_project: fewer than 2 effective dimensions");
    Projection p;
    p.coords = Matrix(n, 2);
    for (int k = 0; k < 2; ++k) {
        Eigen::VectorXd axis = es.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - k);
        Eigen::Index arg = 0;
        axis.cwiseAbs().maxCoeff(&arg);
        if (axis(arg) < 0) axis = -axis;
        const Eigen::VectorXd proj = x * axis;
        for (std::size_t r = 0; r < n; ++r) p.coords(r, static_cast<std::size_t>(k)) = proj(static_cast<Eigen::Index>(r));
        p.explained[k] = ev(static_cast<Eigen::Index>(d) - 1 - k) / total;
    }
    return p;
}

double silhouette(const Matrix& points, const std::vector<int>& labels) {
    const std::size_t n = points.rows();
    require(labels.size() == n, "silhouette: one label per point required");
    std::map<int, std::size_t> sizes;
    for (int l : labels) ++sizes[l];
    require(sizes.size() >= 2, "silhouette: need at least two classes");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::map<int, double> dist;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < points.cols(); ++c) {
                const double diff = points(i, c) - points(j, c);
                s += diff * diff;
            }
            dist[labels[j]] += std::sqrt(s);
        }
        const std::size_t own = sizes[labels[i]];
        if (own <= 1) continue;  // singleton clusters score 0
        const double a = dist[labels[i]] / static_cast<double>(own - 1);
        double b = INFINITY;
        for (const auto& [lab, sz] : sizes)
            if (lab != labels[i]) b = std::min(b, dist[lab] / static_cast<double>(sz));
        const double m = std::max(a, b);
        total += m > 0.0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(n);
}

std::vector<ProjectionRow> latent_projection_export(const std::vector<LatentSnapshot>& snaps) {
    std::vector<ProjectionRow> out;
    for (const auto& s : snaps) {
        require(s.utterance_ids.size() == s.rows.rows() && s.labels.size() == s.rows.rows(),
                "latent_projection_export: snapshot metadata does not match rows");
        const Projection p = pca_project(s.rows);
        for (std::size_t r = 0; r < s.rows.rows(); ++r)
            out.push_back({s.epoch, s.utterance_ids[r], p.coords(r, 0), p.coords(r, 1), s.labels[r] ? "emotion" : "non-emotion"});
    }
    return out;
}

void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "epoch,utterance_id,x,y,class\n" << std::setprecision(17);
    for (const auto& r : rows) os << r.epoch << ',' << r.utterance_id << ',' << r.x << ',' << r.y << ',' << r.cls << '\n';
}

void write_strength_csv(const std::vector<DialoguePrediction>& preds, const std::vector<Dialogue>& ds,
                        const std::filesystem::path& path) {
    require(preds.size() == ds.size(), "write_strength_csv: prediction count differs from dialogue count");
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "dialogue_id,effect,cause,weight\n" << std::setprecision(10);
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const Matrix& a = preds[k].strength;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double norm = 0.0;
            for (std::size_t j = 0; j < i; ++j) norm += std::abs(a(i, j));
            for (std::size_t j = 0; j < a.cols(); ++j) {
                os << ds[k].id << ',' << i + 1 << ',' << j + 1 << ',';
                if (j < i) os << (norm > 0.0 ? a(i, j) / norm : 0.0);
                os << '\n';
            }
        }
    }
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["ece_f1"] = ece_f1;
    j["ice_f1"] = ice_f1 ? nlohmann::json(*ice_f1) : nlohmann::json(nullptr);
    j["interpretable"] = interpretable;
    j["threshold"] = threshold;
    j["candidate_rule"] = candidate_rule;
    nlohmann::json dis = nlohmann::json::object();
    for (const auto& [name, r] : discriminability)
        dis[name] = {{"pos_f1", r.pos_f1}, {"neg_f1", r.neg_f1}, {"gap", r.gap()}, {"pos_count", r.pos_count}, {"neg_count", r.neg_count}};
    j["discriminability"] = dis;
    j["confounder_errors"] = confounder_errors ? nlohmann::json(*confounder_errors) : nlohmann::json(nullptr);
    return j.dump(2);
}

}  // namespace convscm
