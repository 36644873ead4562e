#pragma once

#include "convscm/matrix.hpp"
#include "convscm/scm.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace convscm {

// Dataset files: one JSON object per line. Utterance indices are 1-based on disk, 0-based in memory.
//
//   {"id": "syn-1",
//    "utterances": [{"speaker": 1, "emotion": true, "text": "..."}, ...],
//    "cause_pairs": [[effect, cause], ...],
//    "skeleton": "I",                                   optional
//    "embeddings": [[...], ...] | {"sidecar": "train.emb", "index": k},
//    "implicit_causes": [[...], ...],                   optional
//    "causal_strength": [[...], ...]}                   optional, N x N ground truth
enum class EmbeddingStorage { inline_rows, sidecar };

void write_dataset(const std::vector<Dialogue>& ds, const std::filesystem::path& path,
                   EmbeddingStorage storage = EmbeddingStorage::inline_rows);
std::vector<Dialogue> read_dataset(const std::filesystem::path& path);

Dialogue parse_dialogue_record(std::string_view line, const std::filesystem::path& base_dir = {});
std::string dialogue_record(const Dialogue& d);

// Sidecar: "CSCMEMB1", u64 dims, u64 count, per dialogue (u64 id length, id bytes, u64 rows),
// then every dialogue's rows as little-endian IEEE-754 doubles, row-major, in header order.
struct EmbeddingSidecar {
    std::size_t dims = 0;
    std::vector<std::string> ids;
    std::vector<Matrix> blocks;
};

void write_sidecar(const EmbeddingSidecar& s, const std::filesystem::path& path);
EmbeddingSidecar read_sidecar(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Manifest {
    std::map<std::string, std::size_t> counts;  // split -> dialogues
    std::size_t dims = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> files;   // file name -> sha256
    std::string content_hash;                   // sha256 over "name:hash\n" lines in name order

    std::string to_json() const;
    static Manifest from_json(const std::string& text);
};

// Hashes <split>.jsonl and <split>.emb for each split named in counts.
Manifest build_manifest(const std::filesystem::path& dir, const std::map<std::string, std::size_t>& counts,
                        std::size_t dims, std::uint64_t seed);

// Writes train/eval/test JSONL plus manifest.json into dir.
Manifest write_splits(const DatasetSplits& splits, const std::filesystem::path& dir, std::uint64_t seed,
                      EmbeddingStorage storage = EmbeddingStorage::inline_rows);
DatasetSplits read_splits(const std::filesystem::path& dir);

// Hashed bag-of-tokens projection with unit-norm rows. Empty texts give zero rows and are flagged.
Matrix fallback_embed(const std::vector<std::string>& texts, std::size_t dim, std::vector<bool>* empty_rows = nullptr);

}  // namespace convscm
