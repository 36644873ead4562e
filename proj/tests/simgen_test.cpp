#include "convscm/dataio.hpp"
#include "convscm/error.hpp"
#include "convscm/evaluation.hpp"
#include "convscm/simgen.hpp"
#include "convscm/training.hpp"

#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>

using namespace convscm;
namespace fs = std::filesystem;

namespace {

const PersonaPair kPersonas("system prompt of speaker one", "system prompt of speaker two");
const std::vector<std::string> kHistory{"utterance_1", "utterance_2", "utterance_3", "utterance_4"};

std::vector<ChatMessage> context(SkeletonTag tag, int turn) {
    const std::span<const std::string> hist(kHistory.data(), static_cast<std::size_t>(turn - 1));
    return build_message_context(Skeleton::chain(tag), turn, hist, kPersonas);
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "convscm_simgen" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Fails the first `failures` calls for each key, then echoes the key.
class FlakyBackend final : public ChatBackend {
public:
    FlakyBackend(int failures, std::set<std::string> always_fail = {}) : failures_(failures), always_(std::move(always_fail)) {}

    std::string complete(const ChatRequest& r) override {
        ++calls;
        const std::lock_guard lock(mu_);
        if (always_.count(r.key())) throw BackendError("scripted outage for " + r.key());
        if (seen_[r.key() + "#" + std::to_string(r.index)]++ < failures_) throw BackendError("transient failure");
        return "reply " + r.key() + " #" + std::to_string(r.index);
    }

    std::atomic<int> calls{0};

private:
    int failures_;
    std::set<std::string> always_;
    std::mutex mu_;
    std::map<std::string, int> seen_;
};

SimgenOptions no_sleep(std::vector<long long>* delays = nullptr) {
    SimgenOptions opt;
    opt.embedding_dim = 16;
    opt.sleep = [delays](std::chrono::milliseconds d) {
        if (delays) delays->push_back(d.count());
    };
    return opt;
}

}  // namespace

TEST_SUITE("simgen") {

TEST_CASE("skeleton edge sets") {
    const auto sk = default_skeletons();
    REQUIRE(sk.size() == 4);
    const std::vector<CausePair> base{{1, 0}, {2, 1}, {3, 2}};
    CHECK(Skeleton::chain(SkeletonTag::I).cause_pairs() == base);
    CHECK(Skeleton::chain(SkeletonTag::II).cause_pairs() == std::vector<CausePair>{{1, 0}, {2, 0}, {2, 1}, {3, 2}});
    CHECK(Skeleton::chain(SkeletonTag::III).cause_pairs() == std::vector<CausePair>{{1, 0}, {2, 1}, {3, 1}, {3, 2}});
    CHECK(Skeleton::chain(SkeletonTag::IV).cause_pairs() == std::vector<CausePair>{{1, 0}, {2, 1}, {3, 0}, {3, 2}});
    for (const auto& s : sk)
        for (const auto& e : std::vector<SkeletonEdge>{{1, 2}, {2, 3}, {3, 4}})
            CHECK(std::find(s.edges().begin(), s.edges().end(), e) != s.edges().end());

    const Skeleton fork = Skeleton::custom("fork", {{1, 2}, {1, 3}, {1, 4}});
    CHECK(fork.parents(4) == std::vector<int>{1});
    CHECK_FALSE(fork.tag().has_value());
    CHECK_THROWS_AS(Skeleton::custom("back", {{3, 2}}), ContractError);
    CHECK_THROWS_AS(Skeleton::custom("long", {{1, 5}}), ContractError);
    CHECK_THROWS_AS(Skeleton::custom("dup", {{1, 2}, {1, 2}}), ContractError);
    CHECK_THROWS_AS(fork.parents(0), ContractError);
}

TEST_CASE("message contexts for the worked examples") {
    using M = std::vector<ChatMessage>;
    CHECK(context(SkeletonTag::IV, 3) == M{{"system", kPersonas.speaker1}, {"user", "utterance_2"}});
    CHECK(context(SkeletonTag::IV, 4) ==
          M{{"system", kPersonas.speaker2}, {"user", "utterance_1"}, {"user", "utterance_3"}});
    CHECK(context(SkeletonTag::I, 4) == M{{"system", kPersonas.speaker2}, {"user", "utterance_3"}});
    CHECK(context(SkeletonTag::I, 1) == M{{"system", kPersonas.speaker1}});
    // Speaker one's own first turn is not shown back at turn 3 in Chain I.
    CHECK(context(SkeletonTag::I, 3) == M{{"system", kPersonas.speaker1}, {"user", "utterance_2"}});
}

TEST_CASE("contexts carry one user message per incoming edge") {
    for (const auto& sk : default_skeletons())
        for (int t = 1; t <= Skeleton::kTurns; ++t) {
            CAPTURE(sk.name());
            CAPTURE(t);
            const auto msgs = build_message_context(sk, t, std::span<const std::string>(kHistory.data(), t - 1), kPersonas);
            REQUIRE(msgs.size() == 1 + sk.in_degree(t));
            CHECK(msgs[0].role == "system");
            CHECK(msgs[0].content == kPersonas.for_speaker(speaker_of_turn(t)));
            std::size_t incoming = 0;
            for (const auto& e : sk.edges()) incoming += e.effect == t;
            CHECK(incoming == sk.in_degree(t));
            const auto parents = sk.parents(t);
            for (std::size_t k = 0; k < parents.size(); ++k) {
                CHECK(msgs[k + 1].role == "user");
                CHECK(msgs[k + 1].content == kHistory[static_cast<std::size_t>(parents[k] - 1)]);
            }
        }
}

TEST_CASE("missing history is a contract error") {
    CHECK_THROWS_AS(build_message_context(Skeleton::chain(SkeletonTag::IV), 4,
                                          std::span<const std::string>(kHistory.data(), 1), kPersonas),
                    ContractError);
    CHECK_THROWS_AS(PersonaPair("", "x"), ContractError);
}

TEST_CASE("canned backend substitutes and rejects unscripted keys") {
    CannedBackend backend(std::map<std::string, std::string>{{"I/1", "turn {turn} of {skeleton} #{index}"}});
    ChatRequest req{"I", 1, 7, 0, {}};
    CHECK(backend.complete(req) == "turn 1 of I #7");
    req.turn = 2;
    try {
        backend.complete(req);
        FAIL("expected an error");
    } catch (const BackendError& e) {
        CHECK(std::string(e.what()).find("'I/2'") != std::string::npos);
    }
    CHECK(default_canned_script().size() == 16);
}

TEST_CASE("live backend stays behind the build flag") {
    if (!live_backend_available()) CHECK_THROWS_AS(make_http_backend({}), BackendError);
}

TEST_CASE("generated dialogues follow the skeleton") {
    CannedBackend backend(default_canned_script());
    for (const auto& sk : default_skeletons()) {
        const Dialogue d = generate_dialogue(sk, default_personas(), backend, 1, "x", 3, nullptr, no_sleep());
        CHECK(d.size() == 4);
        CHECK(d.cause_pairs == sk.cause_pairs());
        CHECK(d.skeleton == sk.tag());
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(d.utterances[i].speaker == (i % 2 == 0 ? 1 : 2));
            CHECK(d.utterances[i].text->find("turn " + std::to_string(i + 1)) != std::string::npos);
            CHECK_FALSE(d.utterances[i].emotion.has_value());
        }
        CHECK(d.embeddings.cols() == 16);
    }
    const Dialogue ii = generate_dialogue(Skeleton::chain(SkeletonTag::II), default_personas(), backend, 1, "y");
    CHECK(ii.has_pair(2, 0));
    CHECK(ii.embeddings.cols() == 50);
}

TEST_CASE("retries back off and exhausted dialogues are discarded with a transcript") {
    const fs::path dir = fresh_dir("retry");
    Journal journal(dir / "journal.jsonl");
    std::vector<long long> delays;
    FlakyBackend flaky(2);
    const Dialogue d = generate_dialogue(Skeleton::chain(SkeletonTag::I), kPersonas, flaky, 1, "a", 0, &journal, no_sleep(&delays));
    CHECK(d.utterances[3].text == "reply I/4 #0");
    CHECK(flaky.calls == 12);
    CHECK(delays == std::vector<long long>{500, 1000, 500, 1000, 500, 1000, 500, 1000});

    FlakyBackend down(0, {"III/3"});
    CHECK_THROWS_AS(generate_dialogue(Skeleton::chain(SkeletonTag::III), kPersonas, down, 1, "b", 1, &journal, no_sleep()),
                    BackendError);
    CHECK(down.calls == 2 + 4);
    const auto entries = journal.entries();
    REQUIRE_FALSE(entries.empty());
    CHECK(entries.back().dialogue == "b");
    CHECK(entries.back().status == "discarded");
    std::size_t b_ok = 0, b_err = 0;
    for (const auto& e : entries)
        if (e.dialogue == "b") {
            b_ok += e.status == "ok";
            b_err += e.status == "error";
        }
    CHECK(b_ok == 2);
    CHECK(b_err == 4);
    CHECK_FALSE(journal.completed("b").has_value());
    CHECK(journal.completed("a").has_value());

    // The transcript survives a reload and records the request messages.
    const Journal reloaded(dir / "journal.jsonl");
    CHECK(reloaded.entries() == entries);
    CHECK(entries.front().request.front().role == "system");
}

TEST_CASE("journal resume skips completed dialogues and tolerates a torn tail") {
    const fs::path dir = fresh_dir("resume");
    {
        Journal journal(dir / "j.jsonl");
        CannedBackend backend(default_canned_script());
        generate_dialogue(Skeleton::chain(SkeletonTag::II), kPersonas, backend, 1, "r", 0, &journal, no_sleep());
    }
    {
        std::ofstream os(dir / "j.jsonl", std::ios::app);
        os << R"({"dialogue":"r2","turn":1,"att)";
    }
    Journal journal(dir / "j.jsonl");
    FlakyBackend never(0, {"II/1", "II/2", "II/3", "II/4"});
    const Dialogue d = generate_dialogue(Skeleton::chain(SkeletonTag::II), kPersonas, never, 1, "r", 0, &journal, no_sleep());
    CHECK(never.calls == 0);
    CHECK(d.utterances[0].text->find("turn 1") != std::string::npos);

    std::ofstream(dir / "bad.jsonl") << "{garbage\n" << R"({"dialogue":"x"})" << "\n";
    CHECK_THROWS_AS(Journal(dir / "bad.jsonl"), DataError);
}

TEST_CASE("full simulated batch splits 1381/100/200") {
    CannedBackend backend(default_canned_script());
    SimulatedBatchConfig cfg;
    cfg.options = no_sleep();
    const SimulatedBatch batch = generate_simulated_dataset(cfg, kPersonas, backend, 5);
    CHECK(batch.splits.train.size() == 1381);
    CHECK(batch.splits.eval.size() == 100);
    CHECK(batch.splits.test.size() == 200);
    CHECK(batch.discarded.empty());
    std::map<SkeletonTag, std::size_t> per_tag;
    for (const auto* s : {&batch.splits.train, &batch.splits.eval, &batch.splits.test})
        for (const auto& d : *s) {
            ++per_tag[*d.skeleton];
            CHECK(d.cause_pairs == Skeleton::chain(*d.skeleton).cause_pairs());
        }
    CHECK(per_tag[SkeletonTag::I] == 421);
    CHECK(per_tag[SkeletonTag::IV] == 420);
}

TEST_CASE("canned generation is byte-reproducible across concurrency levels") {
    const fs::path dir = fresh_dir("repro");
    SimulatedBatchConfig cfg;
    cfg.train_size = 12;
    cfg.eval_size = 4;
    cfg.test_size = 4;
    cfg.options = no_sleep();
    std::vector<std::string> hashes;
    for (std::size_t workers : {1u, 4u, 4u}) {
        cfg.concurrency = workers;
        CannedBackend backend(default_canned_script());
        const SimulatedBatch b = generate_simulated_dataset(cfg, kPersonas, backend, 11);
        const fs::path out = dir / ("run" + std::to_string(hashes.size()));
        hashes.push_back(write_splits(b.splits, out, 11).content_hash);
    }
    CHECK(hashes[0] == hashes[1]);
    CHECK(hashes[1] == hashes[2]);
}

TEST_CASE("batch generation records discarded dialogues") {
    const fs::path dir = fresh_dir("discard");
    Journal journal(dir / "j.jsonl");
    FlakyBackend backend(0, {"II/2"});
    SimulatedBatchConfig cfg;
    cfg.train_size = 4;
    cfg.eval_size = 2;
    cfg.test_size = 2;
    cfg.options = no_sleep();
    cfg.options.retry.max_attempts = 2;
    const SimulatedBatch b = generate_simulated_dataset(cfg, kPersonas, backend, 3, &journal);
    CHECK(b.discarded.size() == 2);  // dialogues 2 and 6 use Chain II
    CHECK(b.splits.total() == 6);
    CHECK(std::set<std::string>(b.discarded.begin(), b.discarded.end()) == std::set<std::string>{"sim-2", "sim-6"});
}

TEST_CASE("confounded numeric dataset") {
    ConfoundedSpec spec;
    spec.dim = 8;
    spec.train_size = 8;
    spec.eval_size = 4;
    spec.test_size = 4;
    const DatasetSplits a = generate_confounded_dataset(spec, 2), b = generate_confounded_dataset(spec, 2);
    CHECK(a.train == b.train);
    CHECK(a.total() == 16);
    for (const auto* s : {&a.train, &a.eval, &a.test})
        for (const auto& d : *s) {
            CHECK(d.size() == 4);
            CHECK(d.cause_pairs == Skeleton::chain(*d.skeleton).cause_pairs());
            CHECK(d.implicit_causes.has_value());
            CHECK(d.true_strength.has_value());
        }

    // Turns 2 and 4 of Chain I are correlated through the shared persona beyond the chain path.
    spec.dim = 50;
    spec.train_size = 400;
    spec.eval_size = spec.test_size = 0;
    spec.edge_weight = {0.0, 0.0};
    const DatasetSplits big = generate_confounded_dataset(spec, 3);
    std::vector<double> x, y;
    for (const auto& d : big.train)
        for (std::size_t c = 0; c < spec.dim; ++c) {
            x.push_back(d.embeddings(1, c));
            y.push_back(d.embeddings(3, c));
        }
    CHECK(pearson(x, y) == doctest::Approx(0.5).epsilon(0.15));
}

}  // TEST_SUITE

TEST_SUITE("slow") {

TEST_CASE("full model makes fewer confounder errors than the no-decoder ablation") {
    ConfoundedSpec spec;
    int wins = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const DatasetSplits data = generate_confounded_dataset(spec, seed);
        TrainConfig cfg;
        cfg.seed = seed;
        std::size_t errors[2];
        for (int variant = 0; variant < 2; ++variant) {
            cfg.model.use_decoder = variant == 0;
            const TrainResult tr = train(data.train, data.eval, cfg);
            std::vector<Matrix> scores;
            for (const auto& p : predict_all(tr.best, data.test)) scores.push_back(p.pair_scores);
            errors[variant] = confounder_errors(scores, data.test);
        }
        MESSAGE("seed " << seed << ": full " << errors[0] << ", no decoder " << errors[1]);
        wins += errors[0] < errors[1];
    }
    CHECK(wins >= 8);
}

}  // TEST_SUITE
