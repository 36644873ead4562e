#include "convscm/dataio.hpp"

#include "convscm/error.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace convscm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return rows;
}

Matrix matrix_from_json(const json& j, const std::string& field) {
    if (!j.is_array()) throw DataError(field + " must be an array of rows");
    const std::size_t rows = j.size();
    const std::size_t cols = rows ? j[0].size() : 0;
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const json& row = j[r];
        if (!row.is_array() || row.size() != cols) throw DataError(field + " is ragged at row " + std::to_string(r + 1));
        for (std::size_t c = 0; c < cols; ++c) {
            if (!row[c].is_number()) throw DataError(field + " has a non-numeric entry");
            m(r, c) = row[c].get<double>();
        }
    }
    return m;
}

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is, const fs::path& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("sidecar " + path.string() + ": truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

constexpr char kSidecarMagic[8] = {'C', 'S', 'C', 'M', 'E', 'M', 'B', '1'};

const std::set<std::string> kRecordKeys{"id", "utterances", "cause_pairs", "skeleton", "embeddings", "implicit_causes",
                                        "causal_strength"};

struct SidecarCache {
    fs::path base;
    std::map<std::string, std::shared_ptr<EmbeddingSidecar>> loaded;

    const EmbeddingSidecar& get(const std::string& name) {
        auto it = loaded.find(name);
        if (it == loaded.end())
            it = loaded.emplace(name, std::make_shared<EmbeddingSidecar>(read_sidecar(base / name))).first;
        return *it->second;
    }
};

Dialogue parse_record(std::string_view line, SidecarCache* cache) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw DataError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw DataError("record must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!kRecordKeys.count(k)) throw DataError("unknown field '" + k + "'");
    Dialogue d;
    if (!j.contains("id") || !j["id"].is_string()) throw DataError("missing string field 'id'");
    d.id = j["id"].get<std::string>();
    const std::string who = "record '" + d.id + "': ";
    try {
        if (!j.contains("utterances") || !j["utterances"].is_array()) throw DataError("missing array field 'utterances'");
        for (const json& u : j["utterances"]) {
            if (!u.is_object()) throw DataError("utterance must be an object");
            Utterance x;
            for (const auto& [k, v] : u.items())
                if (k != "speaker" && k != "emotion" && k != "text") throw DataError("unknown utterance field '" + k + "'");
            if (!u.contains("speaker") || !u["speaker"].is_number_integer()) throw DataError("utterance needs integer 'speaker'");
            x.speaker = u["speaker"].get<int>();
            if (u.contains("emotion")) {
                if (!u["emotion"].is_boolean()) throw DataError("'emotion' must be boolean");
                x.emotion = u["emotion"].get<bool>();
            }
            if (u.contains("text")) {
                if (!u["text"].is_string()) throw DataError("'text' must be a string");
                x.text = u["text"].get<std::string>();
            }
            d.utterances.push_back(std::move(x));
        }
        const std::size_t n = d.utterances.size();
        if (!j.contains("cause_pairs") || !j["cause_pairs"].is_array()) throw DataError("missing array field 'cause_pairs'");
        for (const json& p : j["cause_pairs"]) {
            if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
                throw DataError("cause pair must be [effect, cause]");
            const auto e = p[0].get<long long>(), c = p[1].get<long long>();
            const std::string txt = "[" + std::to_string(e) + "," + std::to_string(c) + "]";
            if (e < 1 || c < 1 || e > static_cast<long long>(n) || c > static_cast<long long>(n))
                throw DataError("cause pair " + txt + " out of range for " + std::to_string(n) + " utterances");
            if (c >= e) throw DataError("cause pair " + txt + " has a cause that does not precede its effect");
            d.cause_pairs.emplace_back(static_cast<std::size_t>(e - 1), static_cast<std::size_t>(c - 1));
        }
        std::sort(d.cause_pairs.begin(), d.cause_pairs.end());
        if (std::adjacent_find(d.cause_pairs.begin(), d.cause_pairs.end()) != d.cause_pairs.end())
            throw DataError("duplicate cause pair");
        if (j.contains("skeleton")) {
            if (!j["skeleton"].is_string()) throw DataError("'skeleton' must be a string");
            try {
                d.skeleton = skeleton_from_string(j["skeleton"].get<std::string>());
            } catch (const ContractError& e) {
                throw DataError(e.what());
            }
        }
        if (!j.contains("embeddings")) throw DataError("missing field 'embeddings'");
        const json& emb = j["embeddings"];
        if (emb.is_object()) {
            if (!cache) throw DataError("sidecar reference without a dataset directory");
            if (!emb.contains("sidecar") || !emb["sidecar"].is_string() || !emb.contains("index") ||
                !emb["index"].is_number_unsigned())
                throw DataError("sidecar reference needs 'sidecar' and 'index'");
            const auto& sc = cache->get(emb["sidecar"].get<std::string>());
            const auto idx = emb["index"].get<std::size_t>();
            if (idx >= sc.blocks.size()) throw DataError("sidecar index out of range");
            if (sc.ids[idx] != d.id) throw DataError("sidecar entry " + std::to_string(idx) + " belongs to '" + sc.ids[idx] + "'");
            d.embeddings = sc.blocks[idx];
        } else {
            d.embeddings = matrix_from_json(emb, "embeddings");
        }
        if (d.embeddings.rows() != n)
            throw DataError("embeddings have " + std::to_string(d.embeddings.rows()) + " rows for " + std::to_string(n) +
                            " utterances");
        if (j.contains("implicit_causes")) d.implicit_causes = matrix_from_json(j["implicit_causes"], "implicit_causes");
        if (j.contains("causal_strength")) d.true_strength = matrix_from_json(j["causal_strength"], "causal_strength");
        d.validate();
    } catch (const ContractError& e) {
        throw DataError(who + e.what());
    } catch (const DataError& e) {
        throw DataError(who + e.what());
    } catch (const json::exception& e) {
        throw DataError(who + e.what());
    }
    return d;
}

json record_json(const Dialogue& d) {
    json j;
    j["id"] = d.id;
    json us = json::array();
    for (const auto& u : d.utterances) {
        json x{{"speaker", u.speaker}};
        if (u.emotion) x["emotion"] = *u.emotion;
        if (u.text) x["text"] = *u.text;
        us.push_back(std::move(x));
    }
    j["utterances"] = std::move(us);
    json ps = json::array();
    for (const auto& [e, c] : d.cause_pairs) ps.push_back({e + 1, c + 1});
    j["cause_pairs"] = std::move(ps);
    if (d.skeleton) j["skeleton"] = to_string(*d.skeleton);
    j["embeddings"] = matrix_json(d.embeddings);
    if (d.implicit_causes) j["implicit_causes"] = matrix_json(*d.implicit_causes);
    if (d.true_strength) j["causal_strength"] = matrix_json(*d.true_strength);
    return j;
}

}  // namespace

Dialogue parse_dialogue_record(std::string_view line, const fs::path& base_dir) {
    SidecarCache cache{base_dir, {}};
    return parse_record(line, &cache);
}

std::string dialogue_record(const Dialogue& d) {
    d.validate();
    return record_json(d).dump();
}

void write_dataset(const std::vector<Dialogue>& ds, const fs::path& path, EmbeddingStorage storage) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    fs::path sidecar_path = path;
    sidecar_path.replace_extension(".emb");
    EmbeddingSidecar sc;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        const Dialogue& d = ds[k];
        d.validate();
        json j = record_json(d);
        if (storage == EmbeddingStorage::sidecar) {
            if (k == 0) sc.dims = d.embeddings.cols();
            if (d.embeddings.cols() != sc.dims) throw ContractError("write_dataset: sidecar needs a common embedding width");
            sc.ids.push_back(d.id);
            sc.blocks.push_back(d.embeddings);
            j["embeddings"] = {{"sidecar", sidecar_path.filename().string()}, {"index", k}};
        }
        os << j.dump() << '\n';
    }
    if (storage == EmbeddingStorage::sidecar) write_sidecar(sc, sidecar_path);
    if (!os) throw DataError("write failed for " + path.string());
}

std::vector<Dialogue> read_dataset(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset " + path.string());
    SidecarCache cache{path.parent_path(), {}};
    std::vector<Dialogue> out;
    std::set<std::string> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            Dialogue d = parse_record(line, &cache);
            if (!ids.insert(d.id).second) throw DataError("record '" + d.id + "': duplicate id");
            out.push_back(std::move(d));
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_sidecar(const EmbeddingSidecar& s, const fs::path& path) {
    if (s.ids.size() != s.blocks.size()) throw ContractError("write_sidecar: one id per block required");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(kSidecarMagic, 8);
    put_u64(os, s.dims);
    put_u64(os, s.ids.size());
    for (std::size_t k = 0; k < s.ids.size(); ++k) {
        if (s.blocks[k].cols() != s.dims) throw ContractError("write_sidecar: block width differs from header dims");
        put_u64(os, s.ids[k].size());
        os.write(s.ids[k].data(), static_cast<std::streamsize>(s.ids[k].size()));
        put_u64(os, s.blocks[k].rows());
    }
    for (const Matrix& m : s.blocks)
        for (double v : m.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw DataError("write failed for " + path.string());
}

EmbeddingSidecar read_sidecar(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open sidecar " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kSidecarMagic)) throw DataError("sidecar " + path.string() + ": bad magic");
    EmbeddingSidecar s;
    s.dims = get_u64(is, path);
    const std::uint64_t count = get_u64(is, path);
    if (count > (1ULL << 32)) throw DataError("sidecar " + path.string() + ": implausible count");
    std::vector<std::uint64_t> rows;
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::uint64_t len = get_u64(is, path);
        if (len > 4096) throw DataError("sidecar " + path.string() + ": implausible id length");
        std::string id(len, '\0');
        if (!is.read(id.data(), static_cast<std::streamsize>(len))) throw DataError("sidecar " + path.string() + ": truncated");
        s.ids.push_back(std::move(id));
        rows.push_back(get_u64(is, path));
    }
    for (std::uint64_t r : rows) {
        Matrix m(r, s.dims);
        for (double& v : m.data()) v = std::bit_cast<double>(get_u64(is, path));
        s.blocks.push_back(std::move(m));
    }
    return s;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw DataError("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xF];
    }
    return out;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return sha256_hex(ss.str());
}

std::string Manifest::to_json() const {
    json j{{"counts", counts}, {"dims", dims}, {"seed", seed}, {"files", files}, {"content_hash", content_hash}};
    return j.dump(2);
}

Manifest Manifest::from_json(const std::string& text) {
    Manifest m;
    try {
        const json j = json::parse(text);
        m.counts = j.at("counts").get<std::map<std::string, std::size_t>>();
        m.dims = j.at("dims").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.files = j.at("files").get<std::map<std::string, std::string>>();
        m.content_hash = j.at("content_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    return m;
}

Manifest build_manifest(const fs::path& dir, const std::map<std::string, std::size_t>& counts, std::size_t dims,
                        std::uint64_t seed) {
    Manifest m;
    m.counts = counts;
    m.dims = dims;
    m.seed = seed;
    // Only split payloads; journals and provenance records living alongside are not dataset content.
    std::vector<fs::path> files;
    for (const auto& [split, n] : counts)
        for (const char* ext : {".jsonl", ".emb"})
            if (fs::is_regular_file(dir / (split + ext))) files.push_back(dir / (split + ext));
    std::sort(files.begin(), files.end());
    std::string joined;
    for (const auto& f : files) {
        const std::string h = sha256_file(f);
        m.files[f.filename().string()] = h;
        joined += f.filename().string() + ":" + h + "\n";
    }
    m.content_hash = sha256_hex(joined);
    return m;
}

Manifest write_splits(const DatasetSplits& splits, const fs::path& dir, std::uint64_t seed, EmbeddingStorage storage) {
    fs::create_directories(dir);
    for (const char* stale : {"train.emb", "eval.emb", "test.emb"}) fs::remove(dir / stale);
    write_dataset(splits.train, dir / "train.jsonl", storage);
    write_dataset(splits.eval, dir / "eval.jsonl", storage);
    write_dataset(splits.test, dir / "test.jsonl", storage);
    std::size_t dims = 0;
    for (const auto* part : {&splits.train, &splits.eval, &splits.test})
        if (!part->empty()) dims = part->front().embeddings.cols();
    Manifest m = build_manifest(dir, {{"train", splits.train.size()}, {"eval", splits.eval.size()}, {"test", splits.test.size()}},
                                dims, seed);
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw DataError("cannot write manifest in " + dir.string());
    os << m.to_json() << '\n';
    return m;
}

DatasetSplits read_splits(const fs::path& dir) {
    DatasetSplits s;
    s.train = read_dataset(dir / "train.jsonl");
    s.eval = read_dataset(dir / "eval.jsonl");
    s.test = read_dataset(dir / "test.jsonl");
    return s;
}

Matrix fallback_embed(const std::vector<std::string>& texts, std::size_t dim, std::vector<bool>* empty_rows) {
    require(dim > 0, "fallback_embed: dim must be positive");
    Matrix m(texts.size(), dim);
    if (empty_rows) empty_rows->assign(texts.size(), false);
    for (std::size_t r = 0; r < texts.size(); ++r) {
        std::string token;
        auto flush = [&] {
            if (token.empty()) return;
            std::uint64_t h = 0xcbf29ce484222325ULL;
            for (unsigned char ch : token) {
                h ^= ch;
                h *= 0x100000001b3ULL;
            }
            h ^= h >> 29;  // FNV low bits mix poorly
            h *= 0xBF58476D1CE4E5B9ULL;
            h ^= h >> 32;
            m(r, h % dim) += (h >> 63) ? -1.0 : 1.0;
            token.clear();
        };
        for (unsigned char ch : texts[r]) {
            if (std::isalnum(ch) || ch >= 0x80) token += static_cast<char>(std::tolower(ch));
            else flush();
        }
        flush();
        double n2 = 0.0;
        for (double v : m.row(r)) n2 += v * v;
        if (n2 == 0.0) {
            if (empty_rows) (*empty_rows)[r] = true;
            continue;
        }
        const double inv = 1.0 / std::sqrt(n2);
        for (double& v : m.row(r)) v *= inv;
    }
    return m;
}

}  // namespace convscm
