#include "rubricmem/domain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include <spdlog/spdlog.h>

#include "rubricmem/errors.hpp"

namespace rubricmem {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::empty_rubric: return "EmptyRubric";
        case Errc::degenerate_weights: return "DegenerateWeights";
        case Errc::empty_criterion: return "EmptyCriterion";
        case Errc::precondition: return "PreconditionViolated";
        case Errc::backend_unavailable: return "BackendUnavailable";
        case Errc::malformed_response: return "MalformedResponse";
        case Errc::out_of_range_response: return "OutOfRangeResponse";
        case Errc::partial_trace: return "PartialTrace";
        case Errc::empty_pool: return "EmptyPool";
        case Errc::mismatched_items: return "MismatchedItems";
        case Errc::corrupt_snapshot: return "CorruptSnapshot";
        case Errc::version_mismatch: return "VersionMismatch";
        case Errc::universe_too_large: return "UniverseTooLarge";
        case Errc::unparseable_criterion: return "UnparseableCriterion";
        case Errc::config: return "ConfigError";
        case Errc::data: return "DataError";
        case Errc::io: return "IoError";
    }
    return "Unknown";
}

std::size_t RetrievedMemory::size() const noexcept {
    std::size_t n = 0;
    for (const auto& c : categories) n += c.items.size();
    return n;
}

std::vector<RubricItem> normalize_weights(std::span<const RubricItem> items) {
    if (items.empty()) throw Error(Errc::empty_rubric, "rubric has no items");
    double total = 0.0;
    for (const auto& item : items) {
        if (!std::isfinite(item.weight) || item.weight < 0.0) {
            throw Error(Errc::precondition, "weight must be finite and >= 0 for '" + item.criterion + "'");
        }
        total += item.weight;
    }
    if (total <= 0.0) throw Error(Errc::degenerate_weights, "all weights are zero");

    std::vector<RubricItem> out(items.begin(), items.end());
    for (auto& item : out) item.weight /= total;
    return out;
}

Rubric make_rubric(std::string query_id, std::span<const RubricItem> raw, std::size_t max_items,
                   std::optional<Provenance> provenance) {
    if (raw.empty()) throw Error(Errc::empty_rubric, "no rubric items for query " + query_id);

    std::vector<RubricItem> merged;
    std::map<CriterionKey, std::size_t> seen;
    for (const auto& item : raw) {
        auto key = canonicalize(item.criterion);
        if (auto it = seen.find(key); it != seen.end()) {
            merged[it->second].weight += item.weight;
            continue;
        }
        seen.emplace(std::move(key), merged.size());
        merged.push_back(item);
    }
    if (max_items > 0 && merged.size() > max_items) merged.resize(max_items);

    Rubric rubric{std::move(query_id), {}, provenance};
    try {
        rubric.items = normalize_weights(merged);
    } catch (const Error& e) {
        if (e.code() != Errc::degenerate_weights) throw;
        spdlog::warn("rubric for {} has all-zero weights; using uniform weights", rubric.query_id);
        const double w = 1.0 / static_cast<double>(merged.size());
        for (auto& item : merged) item.weight = w;
        rubric.items = std::move(merged);
    }
    return rubric;
}

Rubric uniform_rubric(std::string query_id, std::span<const std::string> criteria) {
    std::vector<RubricItem> raw;
    raw.reserve(criteria.size());
    for (const auto& c : criteria) raw.push_back({c, 1.0});
    return make_rubric(std::move(query_id), raw, 0);
}

CriterionKey canonicalize(std::string_view criterion) {
    std::string out;
    out.reserve(criterion.size());
    bool pending_space = false;
    for (unsigned char c : criterion) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    auto trimmable = [](unsigned char c) { return std::isspace(c) || std::ispunct(c); };
    std::size_t begin = 0;
    std::size_t end = out.size();
    while (begin < end && trimmable(static_cast<unsigned char>(out[begin]))) ++begin;
    while (end > begin && trimmable(static_cast<unsigned char>(out[end - 1]))) --end;
    if (begin == end) throw Error(Errc::empty_criterion, "criterion is empty after canonicalization");
    return CriterionKey{out.substr(begin, end - begin)};
}

std::string_view to_string(Split v) noexcept {
    switch (v) {
        case Split::tuning: return "tuning";
        case Split::validation: return "validation";
        case Split::evaluation: return "evaluation";
    }
    return "tuning";
}

std::string_view to_string(Origin v) noexcept {
    return v == Origin::base ? "base" : "adversarial";
}

std::string_view to_string(ProposalMode v) noexcept {
    return v == ProposalMode::contrastive ? "contrastive" : "memory_driven";
}

std::string_view to_string(VerifierMode v) noexcept {
    return v == VerifierMode::scalar ? "scalar" : "binary";
}

namespace {

template <typename Enum, std::size_t N>
Enum enum_from_json(const nlohmann::json& j, const Enum (&values)[N], const char* what) {
    const auto name = j.get<std::string>();
    for (Enum v : values) {
        if (to_string(v) == name) return v;
    }
    throw Error(Errc::data, std::string("unknown ") + what + " '" + name + "'");
}

template <typename T>
std::optional<T> optional_field(const nlohmann::json& j, const char* key) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) return it->get<T>();
    return std::nullopt;
}

}  // namespace

void to_json(nlohmann::json& j, Split v) { j = to_string(v); }
void from_json(const nlohmann::json& j, Split& v) {
    static constexpr Split values[] = {Split::tuning, Split::validation, Split::evaluation};
    v = enum_from_json(j, values, "split");
}
void to_json(nlohmann::json& j, Origin v) { j = to_string(v); }
void from_json(const nlohmann::json& j, Origin& v) {
    static constexpr Origin values[] = {Origin::base, Origin::adversarial};
    v = enum_from_json(j, values, "origin");
}
void to_json(nlohmann::json& j, ProposalMode v) { j = to_string(v); }
void from_json(const nlohmann::json& j, ProposalMode& v) {
    static constexpr ProposalMode values[] = {ProposalMode::contrastive, ProposalMode::memory_driven};
    v = enum_from_json(j, values, "proposal mode");
}
void to_json(nlohmann::json& j, VerifierMode v) { j = to_string(v); }
void from_json(const nlohmann::json& j, VerifierMode& v) {
    static constexpr VerifierMode values[] = {VerifierMode::scalar, VerifierMode::binary};
    v = enum_from_json(j, values, "verifier mode");
}

void to_json(nlohmann::json& j, const Query& v) {
    j = {{"id", v.id}, {"text", v.text}, {"split", v.split}};
}
void from_json(const nlohmann::json& j, Query& v) {
    v.id = j.at("id").get<std::string>();
    v.text = j.at("text").get<std::string>();
    v.split = optional_field<Split>(j, "split").value_or(Split::tuning);
    if (v.id.empty() || v.text.empty()) throw Error(Errc::data, "query id and text must be non-empty");
}

void to_json(nlohmann::json& j, const ReferenceAnswer& v) {
    j = {{"query_id", v.query_id}, {"text", v.text}};
}
void from_json(const nlohmann::json& j, ReferenceAnswer& v) {
    v.query_id = j.at("query_id").get<std::string>();
    v.text = j.at("text").get<std::string>();
    if (v.text.empty()) throw Error(Errc::data, "reference text for " + v.query_id + " is empty");
}

void to_json(nlohmann::json& j, const Candidate& v) {
    j = {{"query_id", v.query_id}, {"text", v.text}, {"origin", v.origin}, {"round", v.round}};
}
void from_json(const nlohmann::json& j, Candidate& v) {
    v.query_id = j.at("query_id").get<std::string>();
    v.text = j.at("text").get<std::string>();
    v.origin = j.at("origin").get<Origin>();
    v.round = j.at("round").get<int>();
    if ((v.origin == Origin::base) != (v.round == 0) || v.round < 0) {
        throw Error(Errc::data, "candidate origin/round stamp is inconsistent");
    }
}

void to_json(nlohmann::json& j, const CandidatePool& v) {
    j = {{"query_id", v.query_id}, {"round", v.round}, {"candidates", v.candidates}};
}
void from_json(const nlohmann::json& j, CandidatePool& v) {
    v.query_id = j.at("query_id").get<std::string>();
    v.round = j.at("round").get<int>();
    v.candidates = j.at("candidates").get<std::vector<Candidate>>();
    if (v.candidates.empty()) throw Error(Errc::data, "candidate pool for " + v.query_id + " is empty");
}

void to_json(nlohmann::json& j, const RubricItem& v) {
    j = {{"criterion", v.criterion}, {"weight", v.weight}};
}
void from_json(const nlohmann::json& j, RubricItem& v) {
    v.criterion = j.at("criterion").get<std::string>();
    v.weight = j.at("weight").get<double>();
}

void to_json(nlohmann::json& j, const CriterionKey& v) { j = v.canonical; }
void from_json(const nlohmann::json& j, CriterionKey& v) { v.canonical = j.get<std::string>(); }

void to_json(nlohmann::json& j, const Provenance& v) {
    j = {{"mode", v.mode}, {"memory_version", v.memory_version}};
}
void from_json(const nlohmann::json& j, Provenance& v) {
    v.mode = j.at("mode").get<ProposalMode>();
    v.memory_version = j.at("memory_version").get<std::uint64_t>();
}

void to_json(nlohmann::json& j, const Rubric& v) {
    j = {{"query_id", v.query_id}, {"items", v.items}};
    if (v.provenance) j["provenance"] = *v.provenance;
}
void from_json(const nlohmann::json& j, Rubric& v) {
    v.query_id = j.at("query_id").get<std::string>();
    v.items = j.at("items").get<std::vector<RubricItem>>();
    v.provenance = optional_field<Provenance>(j, "provenance");
}

void to_json(nlohmann::json& j, const RetrievedItem& v) {
    j = {{"criterion", v.criterion},
         {"key", v.key},
         {"mean_reward", v.mean_reward},
         {"updates", v.updates},
         {"evidence", v.evidence}};
}
void from_json(const nlohmann::json& j, RetrievedItem& v) {
    v.criterion = j.at("criterion").get<std::string>();
    v.key = j.at("key").get<CriterionKey>();
    v.mean_reward = j.at("mean_reward").get<double>();
    v.updates = j.at("updates").get<std::size_t>();
    v.evidence = j.at("evidence").get<std::vector<std::string>>();
}

void to_json(nlohmann::json& j, const CategorySelection& v) {
    j = {{"category", v.category}, {"items", v.items}};
}
void from_json(const nlohmann::json& j, CategorySelection& v) {
    v.category = j.at("category").get<std::string>();
    v.items = j.at("items").get<std::vector<RetrievedItem>>();
}

void to_json(nlohmann::json& j, const RetrievedMemory& v) {
    j = {{"bank_version", v.bank_version}, {"categories", v.categories}, {"rendered", v.rendered}};
}
void from_json(const nlohmann::json& j, RetrievedMemory& v) {
    v.bank_version = j.at("bank_version").get<std::uint64_t>();
    v.categories = j.at("categories").get<std::vector<CategorySelection>>();
    v.rendered = j.at("rendered").get<std::string>();
}

}  // namespace rubricmem
