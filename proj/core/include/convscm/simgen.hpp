#pragma once

#include "convscm/scm.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace convscm {

// Directed edge between 1-based turns.
struct SkeletonEdge {
    int cause = 0;
    int effect = 0;

    friend auto operator<=>(const SkeletonEdge&, const SkeletonEdge&) = default;
};

class Skeleton {
public:
    static constexpr int kTurns = 4;

    // Base chain 1->2->3->4 plus the tag's extra edge.
    static Skeleton chain(SkeletonTag tag);
    // Arbitrary four-turn structure (e.g. forks); edges must point forward in time.
    static Skeleton custom(std::string name, std::vector<SkeletonEdge> edges);

    const std::string& name() const noexcept { return name_; }
    std::optional<SkeletonTag> tag() const noexcept { return tag_; }
    const std::vector<SkeletonEdge>& edges() const noexcept { return edges_; }
    std::vector<int> parents(int turn) const;  // ascending
    std::size_t in_degree(int turn) const { return parents(turn).size(); }
    std::vector<CausePair> cause_pairs() const;  // zero-based (effect, cause)

private:
    Skeleton(std::string name, std::optional<SkeletonTag> tag, std::vector<SkeletonEdge> edges);

    std::string name_;
    std::optional<SkeletonTag> tag_;
    std::vector<SkeletonEdge> edges_;
};

std::vector<Skeleton> default_skeletons();

struct PersonaPair {
    std::string speaker1;
    std::string speaker2;

    PersonaPair(std::string s1, std::string s2);
    const std::string& for_speaker(int speaker) const;
};

PersonaPair default_personas();

struct ChatMessage {
    std::string role;
    std::string content;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

inline int speaker_of_turn(int turn) { return turn % 2 == 1 ? 1 : 2; }

// System prompt of the turn's speaker, then one user message per incoming skeleton edge in ascending order.
// history[k] is the text of turn k + 1.
std::vector<ChatMessage> build_message_context(const Skeleton& skeleton, int turn, std::span<const std::string> history,
                                               const PersonaPair& personas);

struct ChatRequest {
    std::string skeleton;
    int turn = 0;
    std::size_t index = 0;  // dialogue index within the batch
    std::uint64_t seed = 0;
    std::vector<ChatMessage> messages;

    std::string key() const { return skeleton + "/" + std::to_string(turn); }
};

// Implementations must be safe to call from several threads.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string complete(const ChatRequest& request) = 0;
};

// Replays responses keyed by "skeleton/turn". Templates may use {turn}, {index} and {skeleton}.
class CannedBackend final : public ChatBackend {
public:
    explicit CannedBackend(std::map<std::string, std::string> script);
    std::string complete(const ChatRequest& request) override;

private:
    std::map<std::string, std::string> script_;
};

// Script covering every default skeleton and turn.
std::map<std::string, std::string> default_canned_script();

struct HttpBackendConfig {
    std::string url = "https://api.openai.com/v1/chat/completions";
    std::string model = "gpt-3.5-turbo";
    std::string api_key_env = "CONVSCM_API_KEY";
    double temperature = 1.0;
    std::chrono::seconds timeout{60};
};

// Throws BackendError when the library was built without live backend support.
std::unique_ptr<ChatBackend> make_http_backend(const HttpBackendConfig& cfg);
bool live_backend_available() noexcept;

struct RetryPolicy {
    int max_attempts = 4;
    std::chrono::milliseconds initial_delay{500};
    double multiplier = 2.0;
};

struct JournalEntry {
    std::string dialogue;
    int turn = 0;  // 0 marks a dialogue status line
    int attempt = 0;
    std::vector<ChatMessage> request;
    std::string response;
    std::string status;  // ok, error, complete, discarded

    friend bool operator==(const JournalEntry&, const JournalEntry&) = default;
};

// Append-only JSONL transcript. Existing entries are loaded so interrupted batches can resume.
class Journal {
public:
    explicit Journal(std::filesystem::path path);

    void append(const JournalEntry& entry);
    // Responses of a dialogue marked complete, in turn order.
    std::optional<std::vector<std::string>> completed(const std::string& dialogue) const;
    std::vector<JournalEntry> entries() const;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::vector<JournalEntry> entries_;
};

struct SimgenOptions {
    std::size_t embedding_dim = 50;
    RetryPolicy retry;
    std::function<void(std::chrono::milliseconds)> sleep;  // defaults to this_thread::sleep_for
};

// Throws BackendError once retries are exhausted; the partial transcript stays in the journal.
Dialogue generate_dialogue(const Skeleton& skeleton, const PersonaPair& personas, ChatBackend& backend, std::uint64_t seed,
                           const std::string& id, std::size_t index = 0, Journal* journal = nullptr,
                           const SimgenOptions& opt = {});

struct SimulatedBatchConfig {
    std::size_t train_size = 1381;
    std::size_t eval_size = 100;
    std::size_t test_size = 200;
    std::vector<Skeleton> skeletons = default_skeletons();
    std::size_t concurrency = 4;
    SimgenOptions options;

    std::size_t total() const noexcept { return train_size + eval_size + test_size; }
};

struct SimulatedBatch {
    DatasetSplits splits;
    std::vector<std::string> discarded;
};

// Skeletons are assigned round-robin and the order is shuffled from seed before splitting.
SimulatedBatch generate_simulated_dataset(const SimulatedBatchConfig& cfg, const PersonaPair& personas,
                                          ChatBackend& backend, std::uint64_t seed, Journal* journal = nullptr);

// Numeric stand-in for simulated dialogues: skeleton edges drive H = (I - A)^-1 E, and both turns of each
// speaker share a persona offset in E, which correlates turns 2 and 4 without an edge in Chain I.
struct ConfoundedSpec {
    std::size_t dim = 50;
    double persona_scale = 1.0;
    double noise_scale = 1.0;
    Range edge_weight{0.7, 1.0};
    std::size_t train_size = 1381;
    std::size_t eval_size = 100;
    std::size_t test_size = 200;
};

DatasetSplits generate_confounded_dataset(const ConfoundedSpec& spec, std::uint64_t seed);

}  // namespace convscm
