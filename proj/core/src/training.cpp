#include "convscm/training.hpp"

#include "convscm/error.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

namespace convscm {

using namespace ad;

void TrainConfig::validate() const {
    require(learning_rate > 0.0 && probe_learning_rate > 0.0, "TrainConfig: learning rates must be positive");
    require(batch_size > 0, "TrainConfig: batch size must be positive");
    require(beta >= 0.0 && lambda_pair >= 0.0 && lambda_emotion >= 0.0, "TrainConfig: loss weights must be non-negative");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0,
            "TrainConfig: invalid Adam constants");
    require(clip_norm > 0.0, "TrainConfig: clip norm must be positive");
    require(threshold > 0.0 && threshold < 1.0, "TrainConfig: threshold must be in (0,1)");
    model.validate();
}

std::string TrainConfig::to_json() const {
    nlohmann::json j{{"learning_rate", learning_rate},
                     {"probe_learning_rate", probe_learning_rate},
                     {"batch_size", batch_size},
                     {"epochs", epochs},
                     {"model", nlohmann::json::parse(config_to_json(model))},
                     {"beta", beta},
                     {"lambda_pair", lambda_pair},
                     {"lambda_emotion", lambda_emotion},
                     {"adam_beta1", adam_beta1},
                     {"adam_beta2", adam_beta2},
                     {"adam_eps", adam_eps},
                     {"clip_norm", clip_norm},
                     {"sample_latent", sample_latent},
                     {"threshold", threshold},
                     {"candidates", to_string(candidates)},
                     {"seed", seed}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("config: ") + e.what());
    }
    static const std::set<std::string> known{"learning_rate", "probe_learning_rate", "batch_size", "epochs", "model",
                                             "beta", "lambda_pair", "lambda_emotion", "adam_beta1", "adam_beta2",
                                             "adam_eps", "clip_norm", "sample_latent", "threshold", "candidates", "seed"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw DataError("config: unknown key '" + k + "'");
    TrainConfig c;
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.probe_learning_rate = j.value("probe_learning_rate", c.probe_learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        if (j.contains("model")) c.model = config_from_json(j["model"].dump());
        c.beta = j.value("beta", c.beta);
        c.lambda_pair = j.value("lambda_pair", c.lambda_pair);
        c.lambda_emotion = j.value("lambda_emotion", c.lambda_emotion);
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.sample_latent = j.value("sample_latent", c.sample_latent);
        c.threshold = j.value("threshold", c.threshold);
        c.candidates = candidate_rule_from_string(j.value("candidates", to_string(c.candidates)));
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

void RunHistory::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "epoch,total,mse,kl,pair_bce,emotion_ce,eval_ece_f1,eval_ice_f1\n" << std::setprecision(10);
    for (const auto& e : epochs) {
        os << e.epoch << ',' << e.total << ',' << e.mse << ',' << e.kl << ',' << e.pair_bce << ',' << e.emotion_ce << ','
           << e.eval_ece_f1 << ',';
        if (e.eval_ice_f1) os << *e.eval_ice_f1;
        os << '\n';
    }
}

BatchNormalizers batch_normalizers(const std::vector<const Dialogue*>& batch, const TrainConfig& cfg) {
    BatchNormalizers n{0.0, 0.0, 0.0, 0.0};
    for (const Dialogue* d : batch) {
        n.rows += static_cast<double>(d->size());
        n.pair_candidates += static_cast<double>(candidate_pairs(*d, cfg.candidates).size());
        for (const auto& u : d->utterances) n.emotion_rows += u.emotion ? 1.0 : 0.0;
    }
    n.implicit_elems = n.rows * static_cast<double>(cfg.model.implicit_dim);
    // Empty candidate or label sets contribute zero loss; avoid dividing by zero.
    n.rows = std::max(n.rows, 1.0);
    n.implicit_elems = std::max(n.implicit_elems, 1.0);
    n.pair_candidates = std::max(n.pair_candidates, 1.0);
    n.emotion_rows = std::max(n.emotion_rows, 1.0);
    return n;
}

LossParts dialogue_loss(const VgaeModel& model, const Dialogue& d, const TrainConfig& cfg, const BatchNormalizers& norm,
                        const ForwardOptions& opt) {
    const ModelConfig& mc = model.config();
    const ForwardTrace tr = model.forward(d.embeddings, {}, opt);
    const Var h = constant(d.embeddings);
    const auto n = static_cast<double>(d.size());

    LossParts out;
    Var total = scalar(0.0);
    const ElboTerms elbo = elbo_loss(h, mc.use_decoder ? tr.h_hat : h, tr.e_hat, tr.z, tr.log_z, mc.latent, mc.temperature, 1.0);
    if (mc.use_decoder) {
        total = add(total, scale(elbo.mse, n / norm.rows));
        out.mse = elbo.mse.value()(0, 0);
    }
    total = add(total, scale(elbo.kl, cfg.beta * n * static_cast<double>(mc.implicit_dim) / norm.implicit_elems));
    out.kl = elbo.kl.value()(0, 0);

    const Matrix cand = candidate_mask(d, cfg.candidates);
    Matrix targets(d.size(), d.size());
    for (const auto& [i, j] : d.cause_pairs) targets(i, j) = 1.0;
    const Var bce = bce_with_logits(tr.pair_logits, targets, cand);
    total = add(total, scale(bce, cfg.lambda_pair / norm.pair_candidates));
    out.pair_bce = bce.value()(0, 0);

    Matrix emo(d.size(), 1), labeled(d.size(), 1);
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!d.utterances[i].emotion) continue;
        labeled(i, 0) = 1.0;
        emo(i, 0) = *d.utterances[i].emotion ? 1.0 : 0.0;
    }
    if (labeled.sum() > 0.0) {
        // The probe is fit on observed rows, on the reconstruction and on the implicit-cause estimate.
        Var ce = bce_with_logits(tr.emotion_h_hat, emo, labeled);
        if (tr.emotion_e_hat && mc.use_decoder) ce = add(ce, bce_with_logits(tr.emotion_e_hat, emo, labeled));
        if (model.params().emotion_weight.value().rows() == d.embeddings.cols())
            ce = add(ce, bce_with_logits(model.emotion_var(h), emo, labeled));
        total = add(total, scale(ce, cfg.lambda_emotion / norm.emotion_rows));
        out.emotion_ce = ce.value()(0, 0);
    }
    out.total = total;
    return out;
}

Adam::Adam(std::vector<Parameter*> params, std::vector<double> lrs, double beta1, double beta2, double eps)
    : params_(std::move(params)), lrs_(std::move(lrs)), b1_(beta1), b2_(beta2), eps_(eps) {
    require(params_.size() == lrs_.size(), "Adam: one learning rate per parameter");
    for (Parameter* p : params_) {
        m_.emplace_back(p->value().rows(), p->value().cols());
        v_.emplace_back(p->value().rows(), p->value().cols());
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& w = params_[k]->value().data();
        const auto& g = params_[k]->grad().data();
        auto& m = m_[k].data();
        auto& v = v_[k].data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
            w[i] -= lrs_[k] * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

double global_grad_norm(const std::vector<Parameter*>& params) {
    double s = 0.0;
    for (Parameter* p : params)
        for (double g : p->grad().data()) s += g * g;
    return std::sqrt(s);
}

void clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
    const double n = global_grad_norm(params);
    if (n <= max_norm || n == 0.0) return;
    const double k = max_norm / n;
    for (Parameter* p : params) p->grad() *= k;
}

namespace {

void check_widths(const std::vector<Dialogue>& ds, std::size_t width, const char* what) {
    for (const auto& d : ds) {
        d.validate();
        require(d.embeddings.cols() == width, std::string("train: ") + what + " dialogue '" + d.id + "' has width " +
                                                  std::to_string(d.embeddings.cols()) + ", model expects " +
                                                  std::to_string(width));
    }
}

LatentSnapshot take_snapshot(const VgaeModel& model, const std::vector<Dialogue>& ds, std::size_t epoch) {
    LatentSnapshot s;
    s.epoch = epoch;
    std::size_t rows = 0;
    for (const auto& d : ds) rows += d.size();
    s.rows = Matrix(rows, model.config().implicit_dim);
    std::size_t r = 0;
    for (const auto& d : ds) {
        const Matrix e = model.forward(d.embeddings, {}, ForwardOptions{}).e_hat.value();
        for (std::size_t i = 0; i < d.size(); ++i, ++r) {
            std::copy(e.row(i).begin(), e.row(i).end(), s.rows.row(r).begin());
            s.utterance_ids.push_back(d.id + ":" + std::to_string(i + 1));
            s.labels.push_back(d.utterances[i].emotion.value_or(false) ? 1 : 0);
        }
    }
    return s;
}

bool wants_snapshot(const TrainHooks& hooks, std::size_t epoch) {
    return hooks.snapshot_set &&
           std::find(hooks.snapshot_epochs.begin(), hooks.snapshot_epochs.end(), epoch) != hooks.snapshot_epochs.end();
}

}  // namespace

TrainResult train(const std::vector<Dialogue>& train_set, const std::vector<Dialogue>& eval_set, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
    cfg.validate();
    require(!train_set.empty(), "train: empty training split");
    check_widths(train_set, cfg.model.input_dim, "training");
    check_widths(eval_set, cfg.model.input_dim, "evaluation");

    VgaeModel model(cfg.model, cfg.seed);
    auto params = model.params().all();
    const auto probe = model.params().emotion_probe();
    std::vector<double> lrs;
    for (Parameter* p : params)
        lrs.push_back(std::find(probe.begin(), probe.end(), p) != probe.end() ? cfg.probe_learning_rate : cfg.learning_rate);
    Adam opt(params, lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    SplitMix64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    SplitMix64 noise_rng(derive_seed(cfg.seed, "noise"));

    TrainResult result{model, model, 0, {}, {}};
    if (wants_snapshot(hooks, 0)) result.snapshots.push_back(take_snapshot(model, *hooks.snapshot_set, 0));
    double best_f1 = -1.0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);
        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<const Dialogue*> batch;
            for (std::size_t k = start; k < stop; ++k) batch.push_back(&train_set[order[k]]);
            const BatchNormalizers norm = batch_normalizers(batch, cfg);
            for (Parameter* p : params) p->zero_grad();

            double total = 0.0, mse = 0.0, kl = 0.0, bce = 0.0, ce = 0.0;
            for (const Dialogue* d : batch) {
                ForwardOptions fo{true, cfg.sample_latent, &noise_rng};
                const LossParts lp = dialogue_loss(model, *d, cfg, norm, fo);
                const double v = lp.total.value()(0, 0);
                if (!std::isfinite(v))
                    throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " on dialogue '" +
                                       d->id + "'");
                backward(lp.total);
                const auto n = static_cast<double>(d->size());
                total += v;
                mse += lp.mse * n / norm.rows;
                kl += lp.kl * n / norm.rows;
                bce += lp.pair_bce / norm.pair_candidates;
                ce += lp.emotion_ce / norm.emotion_rows;
            }
            clip_grad_norm(params, cfg.clip_norm);
            opt.step();
            rec.total += total;
            rec.mse += mse;
            rec.kl += kl;
            rec.pair_bce += bce;
            rec.emotion_ce += ce;
            ++batches;
        }
        const auto nb = static_cast<double>(batches);
        rec.total /= nb;
        rec.mse /= nb;
        rec.kl /= nb;
        rec.pair_bce /= nb;
        rec.emotion_ce /= nb;
        if (!std::isfinite(rec.total)) throw NumericError("train: loss diverged at epoch " + std::to_string(epoch));

        if (!eval_set.empty()) {
            const auto preds = predict_all(model, eval_set);
            rec.eval_ece_f1 = ece_scores(preds, eval_set, cfg.threshold, cfg.candidates).f1;
            if (cfg.model.implicit_dim == cfg.model.input_dim) rec.eval_ice_f1 = ice_scores(model, preds, eval_set).f1;
        }
        if (rec.eval_ece_f1 > best_f1) {
            best_f1 = rec.eval_ece_f1;
            result.best = model;
            result.best_epoch = epoch;
        }
        if (wants_snapshot(hooks, epoch)) result.snapshots.push_back(take_snapshot(model, *hooks.snapshot_set, epoch));
        result.history.epochs.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
    }
    result.last = std::move(model);
    if (cfg.epochs == 0) result.best = result.last;
    return result;
}

MetricSummary summarize(const std::vector<double>& values) {
    MetricSummary s;
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

std::string format_mean_std(const MetricSummary& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f±%.1f", s.mean, s.stddev);
    return buf;
}

std::vector<double> MultiRunResult::column(const std::string& metric) const {
    const auto it = std::find(metrics.begin(), metrics.end(), metric);
    require(it != metrics.end(), "multi_run: unknown metric '" + metric + "'");
    const auto k = static_cast<std::size_t>(it - metrics.begin());
    std::vector<double> out;
    for (const auto& r : runs) out.push_back(r[k]);
    return out;
}

std::string MultiRunResult::table_row() const {
    std::string out;
    for (std::size_t k = 0; k < metrics.size(); ++k) {
        if (k) out += " | ";
        out += metrics[k] + " " + format_mean_std(summary[k]);
    }
    return out;
}

void MultiRunResult::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "run";
    for (const auto& m : metrics) os << ',' << m;
    os << '\n' << std::setprecision(10);
    for (std::size_t r = 0; r < runs.size(); ++r) {
        os << r + 1;
        for (double v : runs[r]) os << ',' << v;
        os << '\n';
    }
    os << "mean";
    for (const auto& s : summary) os << ',' << s.mean;
    os << "\nstd";
    for (const auto& s : summary) os << ',' << s.stddev;
    os << '\n';
}

std::map<std::string, double> default_run_metrics(const VgaeModel& model, const DatasetSplits& data, const TrainConfig& cfg) {
    std::map<std::string, double> m;
    const auto preds = predict_all(model, data.test);
    m["ece_f1"] = ece_scores(preds, data.test, cfg.threshold, cfg.candidates).f1;
    if (model.config().implicit_dim == model.config().input_dim) m["ice_f1"] = ice_scores(model, preds, data.test).f1;
    std::vector<Matrix> scores;
    for (const auto& p : preds) scores.push_back(p.pair_scores);
    try {
        const auto r = discriminability(scores, data.test, Construction::reversal, cfg.threshold);
        m["reversal_pos_f1"] = r.pos_f1;
        m["reversal_neg_f1"] = r.neg_f1;
    } catch (const ContractError&) {
        // no reversal samples in this split
    }
    return m;
}

DatasetSplits resplit(const DatasetSplits& data, std::uint64_t seed) {
    std::vector<const Dialogue*> pool;
    for (const auto* part : {&data.train, &data.eval, &data.test})
        for (const auto& d : *part) pool.push_back(&d);
    SplitMix64 rng(derive_seed(seed, "resplit"));
    rng.shuffle(pool);
    DatasetSplits out;
    std::size_t k = 0;
    for (; k < data.train.size(); ++k) out.train.push_back(*pool[k]);
    for (; k < data.train.size() + data.eval.size(); ++k) out.eval.push_back(*pool[k]);
    for (; k < pool.size(); ++k) out.test.push_back(*pool[k]);
    return out;
}

MultiRunResult multi_run(const DatasetSplits& data, const TrainConfig& cfg, const MultiRunOptions& opt,
                         const RunEvaluator& evaluate) {
    require(opt.runs >= 2, "multi_run: need at least two runs");
    MultiRunResult out;
    for (std::size_t r = 0; r < opt.runs; ++r) {
        TrainConfig rc = cfg;
        rc.seed = opt.force_same_seed ? cfg.seed : derive_seed(cfg.seed, "run", r);
        const DatasetSplits split = opt.resplit ? resplit(data, rc.seed) : data;
        TrainResult tr = train(split.train, split.eval, rc);
        const VgaeModel& model = opt.use_best ? tr.best : tr.last;
        const auto metrics = evaluate ? evaluate(model, split) : default_run_metrics(model, split, rc);
        if (r == 0)
            for (const auto& [k, v] : metrics) out.metrics.push_back(k);
        std::vector<double> row;
        for (const auto& k : out.metrics) {
            const auto it = metrics.find(k);
            require(it != metrics.end(), "multi_run: metric '" + k + "' missing in run " + std::to_string(r + 1));
            row.push_back(it->second);
        }
        out.runs.push_back(std::move(row));
    }
    for (const auto& k : out.metrics) out.summary.push_back(summarize(out.column(k)));
    return out;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b, double alpha) {
    require(a.size() == b.size(), "paired_t_test: score lists differ in length");
    require(a.size() >= 2, "paired_t_test: need at least two pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const MetricSummary s = summarize(d);
    TTestResult r;
    r.dof = n - 1;
    r.mean_diff = s.mean;
    if (s.stddev == 0.0) {
        if (s.mean == 0.0) return r;  // identical lists: t = 0, p = 1
        r.degenerate = true;
        r.t = std::copysign(INFINITY, s.mean);
        r.p = 0.0;
        r.significant = true;
        return r;
    }
    r.t = s.mean / (s.stddev / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(static_cast<double>(r.dof));
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    r.significant = r.p < alpha;
    return r;
}

}  // namespace convscm
