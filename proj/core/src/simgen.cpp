#include "convscm/simgen.hpp"

#include "convscm/dataio.hpp"
#include "convscm/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <thread>

#if CONVSCM_LIVE_BACKEND
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#endif

namespace convscm {

using nlohmann::json;

Skeleton::Skeleton(std::string name, std::optional<SkeletonTag> tag, std::vector<SkeletonEdge> edges)
    : name_(std::move(name)), tag_(tag), edges_(std::move(edges)) {
    require(!name_.empty(), "Skeleton: empty name");
    for (const auto& e : edges_) {
        require(e.cause >= 1 && e.effect <= kTurns && e.cause < e.effect,
                "Skeleton " + name_ + ": edge " + std::to_string(e.cause) + "->" + std::to_string(e.effect) +
                    " must point forward within " + std::to_string(kTurns) + " turns");
    }
    std::sort(edges_.begin(), edges_.end());
    require(std::adjacent_find(edges_.begin(), edges_.end()) == edges_.end(), "Skeleton " + name_ + ": duplicate edge");
}

Skeleton Skeleton::chain(SkeletonTag tag) {
    std::vector<SkeletonEdge> edges{{1, 2}, {2, 3}, {3, 4}};
    switch (tag) {
    case SkeletonTag::I: break;
    case SkeletonTag::II: edges.push_back({1, 3}); break;
    case SkeletonTag::III: edges.push_back({2, 4}); break;
    case SkeletonTag::IV: edges.push_back({1, 4}); break;
    }
    return Skeleton(to_string(tag), tag, std::move(edges));
}

Skeleton Skeleton::custom(std::string name, std::vector<SkeletonEdge> edges) {
    return Skeleton(std::move(name), std::nullopt, std::move(edges));
}

std::vector<int> Skeleton::parents(int turn) const {
    require(turn >= 1 && turn <= kTurns, "Skeleton: turn " + std::to_string(turn) + " out of range");
    std::vector<int> out;
    for (const auto& e : edges_)
        if (e.effect == turn) out.push_back(e.cause);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<CausePair> Skeleton::cause_pairs() const {
    std::vector<CausePair> out;
    for (const auto& e : edges_) out.emplace_back(e.effect - 1, e.cause - 1);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Skeleton> default_skeletons() {
    return {Skeleton::chain(SkeletonTag::I), Skeleton::chain(SkeletonTag::II), Skeleton::chain(SkeletonTag::III),
            Skeleton::chain(SkeletonTag::IV)};
}

PersonaPair::PersonaPair(std::string s1, std::string s2) : speaker1(std::move(s1)), speaker2(std::move(s2)) {
    require(!speaker1.empty() && !speaker2.empty(), "PersonaPair: system prompts must be non-empty");
}

const std::string& PersonaPair::for_speaker(int speaker) const {
    require(speaker == 1 || speaker == 2, "PersonaPair: speaker must be 1 or 2");
    return speaker == 1 ? speaker1 : speaker2;
}

PersonaPair default_personas() {
    return PersonaPair(
        "You are Sam, a nurse coming off a long night shift. Reply to the messages you are given in one or two "
        "casual sentences, in character.",
        "You are Robin, Sam's roommate, who studies architecture and worries about deadlines. Reply to the messages "
        "you are given in one or two casual sentences, in character.");
}

std::vector<ChatMessage> build_message_context(const Skeleton& skeleton, int turn, std::span<const std::string> history,
                                               const PersonaPair& personas) {
    const auto parents = skeleton.parents(turn);
    std::vector<ChatMessage> msgs;
    msgs.push_back({"system", personas.for_speaker(speaker_of_turn(turn))});
    for (int p : parents) {
        if (static_cast<std::size_t>(p) > history.size())
            throw ContractError("build_message_context: turn " + std::to_string(turn) + " of skeleton " + skeleton.name() +
                                " needs turn " + std::to_string(p) + " but history has " + std::to_string(history.size()));
        msgs.push_back({"user", history[static_cast<std::size_t>(p - 1)]});
    }
    return msgs;
}

CannedBackend::CannedBackend(std::map<std::string, std::string> script) : script_(std::move(script)) {}

std::string CannedBackend::complete(const ChatRequest& request) {
    const auto it = script_.find(request.key());
    if (it == script_.end()) throw BackendError("canned backend: no scripted response for key '" + request.key() + "'");
    std::string out;
    const std::string& tpl = it->second;
    for (std::size_t i = 0; i < tpl.size();) {
        auto sub = [&](std::string_view name, const std::string& value) {
            if (tpl.compare(i, name.size(), name) != 0) return false;
            out += value;
            i += name.size();
            return true;
        };
        if (sub("{turn}", std::to_string(request.turn)) || sub("{index}", std::to_string(request.index)) ||
            sub("{skeleton}", request.skeleton))
            continue;
        out += tpl[i++];
    }
    return out;
}

std::map<std::string, std::string> default_canned_script() {
    static const char* lines[4] = {
        "dialogue {index} turn {turn}: I finally got the afternoon off",
        "dialogue {index} turn {turn}: that sounds great, the studio kept me late again",
        "dialogue {index} turn {turn}: want to grab dinner before you start the next model",
        "dialogue {index} turn {turn}: sure, I can spare an hour if we leave soon",
    };
    std::map<std::string, std::string> script;
    for (const auto& s : default_skeletons())
        for (int t = 1; t <= Skeleton::kTurns; ++t) script[s.name() + "/" + std::to_string(t)] = std::string(lines[t - 1]) + " [{skeleton}]";
    return script;
}

bool live_backend_available() noexcept {
#if CONVSCM_LIVE_BACKEND
    return true;
#else
    return false;
#endif
}

#if CONVSCM_LIVE_BACKEND
namespace {

class HttpBackend final : public ChatBackend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        const char* key = std::getenv(cfg_.api_key_env.c_str());
        if (!key || !*key) throw BackendError("http backend: environment variable " + cfg_.api_key_env + " is not set");
        key_ = key;
        const auto scheme_end = cfg_.url.find("://");
        if (scheme_end == std::string::npos) throw BackendError("http backend: url needs a scheme: " + cfg_.url);
        const auto path_start = cfg_.url.find('/', scheme_end + 3);
        origin_ = cfg_.url.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
    }

    std::string complete(const ChatRequest& request) override {
        json msgs = json::array();
        for (const auto& m : request.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
        const json body{{"model", cfg_.model}, {"messages", msgs}, {"temperature", cfg_.temperature},
                        {"seed", request.seed & 0x7FFFFFFF}};
        httplib::Client cli(origin_);
        cli.set_read_timeout(cfg_.timeout);
        cli.set_connection_timeout(cfg_.timeout);
        const httplib::Headers headers{{"Authorization", "Bearer " + key_}};
        auto res = cli.Post(path_, headers, body.dump(), "application/json");
        if (!res) throw BackendError("http backend: " + httplib::to_string(res.error()));
        if (res->status != 200) throw BackendError("http backend: status " + std::to_string(res->status) + ": " + res->body);
        try {
            return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw BackendError(std::string("http backend: malformed response: ") + e.what());
        }
    }

private:
    HttpBackendConfig cfg_;
    std::string key_, origin_, path_;
};

}  // namespace
#endif

std::unique_ptr<ChatBackend> make_http_backend(const HttpBackendConfig& cfg) {
#if CONVSCM_LIVE_BACKEND
    return std::make_unique<HttpBackend>(cfg);
#else
    (void)cfg;
    throw BackendError("live backend not compiled in; rebuild with CONVSCM_LIVE_BACKEND=ON");
#endif
}

namespace {

json entry_json(const JournalEntry& e) {
    json req = json::array();
    for (const auto& m : e.request) req.push_back({{"role", m.role}, {"content", m.content}});
    return {{"dialogue", e.dialogue}, {"turn", e.turn}, {"attempt", e.attempt}, {"request", req},
            {"response", e.response}, {"status", e.status}};
}

JournalEntry entry_from_json(const json& j) {
    JournalEntry e;
    e.dialogue = j.at("dialogue").get<std::string>();
    e.turn = j.at("turn").get<int>();
    e.attempt = j.at("attempt").get<int>();
    for (const auto& m : j.at("request")) e.request.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    e.response = j.at("response").get<std::string>();
    e.status = j.at("status").get<std::string>();
    return e;
}

}  // namespace

Journal::Journal(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream is(path_);
    if (!is) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            entries_.push_back(entry_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            // A torn final line from an interrupted run is dropped; anything earlier is corruption.
            if (is.peek() == std::char_traits<char>::eof()) break;
            throw DataError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void Journal::append(const JournalEntry& entry) {
    const std::lock_guard lock(mu_);
    std::ofstream os(path_, std::ios::app);
    if (!os) throw DataError("cannot append to journal " + path_.string());
    os << entry_json(entry).dump() << '\n';
    os.flush();
    if (!os) throw DataError("journal write failed: " + path_.string());
    entries_.push_back(entry);
}

std::optional<std::vector<std::string>> Journal::completed(const std::string& dialogue) const {
    const std::lock_guard lock(mu_);
    std::optional<std::vector<std::string>> out;
    std::map<int, std::string> turns;
    for (const auto& e : entries_) {
        if (e.dialogue != dialogue) continue;
        if (e.turn > 0 && e.status == "ok") turns[e.turn] = e.response;
        if (e.turn == 0 && e.status == "complete" && turns.size() == static_cast<std::size_t>(Skeleton::kTurns)) {
            out.emplace();
            for (const auto& [t, r] : turns) out->push_back(r);
        }
        if (e.turn == 0 && e.status != "complete") turns.clear();
    }
    return out;
}

std::vector<JournalEntry> Journal::entries() const {
    const std::lock_guard lock(mu_);
    return entries_;
}

namespace {

Dialogue assemble(const Skeleton& skeleton, const std::string& id, std::vector<std::string> texts, std::size_t dim) {
    Dialogue d;
    d.id = id;
    for (int t = 1; t <= Skeleton::kTurns; ++t) {
        Utterance u;
        u.speaker = speaker_of_turn(t);
        u.text = texts[static_cast<std::size_t>(t - 1)];
        d.utterances.push_back(std::move(u));
    }
    d.embeddings = fallback_embed(texts, dim);
    d.cause_pairs = skeleton.cause_pairs();
    d.skeleton = skeleton.tag();
    d.validate();
    return d;
}

}  // namespace

Dialogue generate_dialogue(const Skeleton& skeleton, const PersonaPair& personas, ChatBackend& backend, std::uint64_t seed,
                           const std::string& id, std::size_t index, Journal* journal, const SimgenOptions& opt) {
    require(opt.retry.max_attempts >= 1, "generate_dialogue: max_attempts must be at least 1");
    if (journal) {
        if (auto done = journal->completed(id)) return assemble(skeleton, id, std::move(*done), opt.embedding_dim);
    }
    std::vector<std::string> history;
    for (int t = 1; t <= Skeleton::kTurns; ++t) {
        ChatRequest req{skeleton.name(), t, index, derive_seed(seed, "turn", static_cast<std::uint64_t>(t)),
                        build_message_context(skeleton, t, history, personas)};
        auto delay = opt.retry.initial_delay;
        for (int attempt = 1;; ++attempt) {
            try {
                std::string reply = backend.complete(req);
                if (journal) journal->append({id, t, attempt, req.messages, reply, "ok"});
                history.push_back(std::move(reply));
                break;
            } catch (const BackendError& e) {
                if (journal) journal->append({id, t, attempt, req.messages, e.what(), "error"});
                if (attempt >= opt.retry.max_attempts) {
                    if (journal) journal->append({id, 0, attempt, {}, e.what(), "discarded"});
                    throw BackendError("dialogue " + id + " discarded after " + std::to_string(attempt) +
                                       " attempts at turn " + std::to_string(t) + ": " + e.what());
                }
                if (opt.sleep)
                    opt.sleep(delay);
                else
                    std::this_thread::sleep_for(delay);
                delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * opt.retry.multiplier));
            }
        }
    }
    if (journal) journal->append({id, 0, 0, {}, "", "complete"});
    return assemble(skeleton, id, std::move(history), opt.embedding_dim);
}

SimulatedBatch generate_simulated_dataset(const SimulatedBatchConfig& cfg, const PersonaPair& personas,
                                          ChatBackend& backend, std::uint64_t seed, Journal* journal) {
    require(!cfg.skeletons.empty(), "generate_simulated_dataset: no skeletons");
    require(cfg.concurrency >= 1, "generate_simulated_dataset: concurrency must be at least 1");
    const std::size_t total = cfg.total();
    std::vector<std::optional<Dialogue>> slots(total);
    std::vector<std::string> errors(total);
    std::atomic<std::size_t> next{0};
    std::exception_ptr fatal;
    std::mutex fatal_mu;

    auto worker = [&] {
        for (std::size_t k; (k = next.fetch_add(1)) < total;) {
            try {
                slots[k] = generate_dialogue(cfg.skeletons[k % cfg.skeletons.size()], personas, backend,
                                             derive_seed(seed, "simgen", k), "sim-" + std::to_string(k + 1), k, journal,
                                             cfg.options);
            } catch (const BackendError& e) {
                errors[k] = e.what();
            } catch (...) {
                const std::lock_guard lock(fatal_mu);
                if (!fatal) fatal = std::current_exception();
                next.store(total);
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        const std::size_t workers = std::min(cfg.concurrency, std::max<std::size_t>(total, 1));
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    if (fatal) std::rethrow_exception(fatal);

    std::vector<std::size_t> order(total);
    for (std::size_t k = 0; k < total; ++k) order[k] = k;
    SplitMix64 rng(derive_seed(seed, "simgen-order"));
    rng.shuffle(order);

    SimulatedBatch out;
    for (std::size_t k : order) {
        if (!slots[k]) {
            out.discarded.push_back("sim-" + std::to_string(k + 1));
            continue;
        }
        auto& dest = out.splits.train.size() < cfg.train_size  ? out.splits.train
                     : out.splits.eval.size() < cfg.eval_size ? out.splits.eval
                                                               : out.splits.test;
        dest.push_back(std::move(*slots[k]));
    }
    return out;
}

DatasetSplits generate_confounded_dataset(const ConfoundedSpec& spec, std::uint64_t seed) {
    require(spec.dim >= 1, "generate_confounded_dataset: dim must be positive");
    require(spec.edge_weight.lo <= spec.edge_weight.hi, "generate_confounded_dataset: empty edge weight range");
    const auto skeletons = default_skeletons();
    const std::size_t total = spec.train_size + spec.eval_size + spec.test_size;
    DatasetSplits out;
    for (std::size_t k = 0; k < total; ++k) {
        const Skeleton& sk = skeletons[k % skeletons.size()];
        SplitMix64 rng(derive_seed(seed, "confounded", k));
        constexpr std::size_t n = Skeleton::kTurns;
        Matrix persona(2, spec.dim);
        for (double& v : persona.data()) v = rng.normal(0.0, spec.persona_scale);
        Matrix e(n, spec.dim);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < spec.dim; ++c)
                e(i, c) = persona(i % 2, c) + rng.normal(0.0, spec.noise_scale);
        CausalStrength a(n);
        for (const auto& [effect, cause] : sk.cause_pairs()) a.set(effect, cause, rng.uniform(spec.edge_weight.lo, spec.edge_weight.hi));
        Dialogue d;
        d.id = "conf-" + std::to_string(k + 1);
        for (std::size_t i = 0; i < n; ++i) d.utterances.push_back(Utterance{static_cast<int>(i % 2) + 1, std::nullopt, std::nullopt});
        d.embeddings = forward_generate(a, e);
        d.implicit_causes = std::move(e);
        d.true_strength = a.weights();
        d.cause_pairs = sk.cause_pairs();
        d.skeleton = sk.tag();
        auto& dest = k < spec.train_size                    ? out.train
                     : k < spec.train_size + spec.eval_size ? out.eval
                                                            : out.test;
        dest.push_back(std::move(d));
    }
    return out;
}

}  // namespace convscm
