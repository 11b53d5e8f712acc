#pragma once

// Core value types shared by every module. All of them are plain immutable
// values once constructed; copying is the way to snapshot.

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace rubricmem {

inline constexpr std::size_t kDefaultMaxRubricItems = 30;
inline constexpr double kWeightSumTolerance = 1e-9;

enum class Split { tuning, validation, evaluation };
enum class Origin { base, adversarial };
enum class ProposalMode { contrastive, memory_driven };
enum class VerifierMode { scalar, binary };

struct Query {
    std::string id;
    std::string text;
    Split split = Split::tuning;

    friend bool operator==(const Query&, const Query&) = default;
};

struct ReferenceAnswer {
    std::string query_id;
    std::string text;

    friend bool operator==(const ReferenceAnswer&, const ReferenceAnswer&) = default;
};

/// `round` is the outer round the candidate was generated in: 0 for base
/// answers, >= 1 for adversarial ones.
struct Candidate {
    std::string query_id;
    std::string text;
    Origin origin = Origin::base;
    int round = 0;

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Candidates a query is tuned against during outer round `round`. A pool that
/// was carried forward after an adversary failure keeps its candidates' original
/// origin/round stamps, so candidate.round <= pool.round.
struct CandidatePool {
    std::string query_id;
    int round = 0;
    std::vector<Candidate> candidates;

    friend bool operator==(const CandidatePool&, const CandidatePool&) = default;
};

struct RubricItem {
    std::string criterion;
    double weight = 0.0;

    friend bool operator==(const RubricItem&, const RubricItem&) = default;
};

struct CriterionKey {
    std::string canonical;

    friend auto operator<=>(const CriterionKey&, const CriterionKey&) = default;
};

struct Provenance {
    ProposalMode mode = ProposalMode::memory_driven;
    std::uint64_t memory_version = 0;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Weighted criteria for one query. Construct through make_rubric so that the
/// weight-sum and uniqueness invariants hold.
struct Rubric {
    std::string query_id;
    std::vector<RubricItem> items;
    std::optional<Provenance> provenance;

    friend bool operator==(const Rubric&, const Rubric&) = default;
};

/// One criterion picked out of the memory bank for proposer context.
struct RetrievedItem {
    std::string criterion;
    CriterionKey key;
    double mean_reward = 0.0;
    std::size_t updates = 0;
    std::vector<std::string> evidence;

    friend bool operator==(const RetrievedItem&, const RetrievedItem&) = default;
};

struct CategorySelection {
    std::string category;
    std::vector<RetrievedItem> items;

    friend bool operator==(const CategorySelection&, const CategorySelection&) = default;
};

/// Category-balanced view of the memory bank handed to the rubric proposer.
struct RetrievedMemory {
    std::uint64_t bank_version = 0;
    std::vector<CategorySelection> categories;
    std::string rendered;

    [[nodiscard]] bool empty() const noexcept { return categories.empty(); }
    [[nodiscard]] std::size_t size() const noexcept;

    friend bool operator==(const RetrievedMemory&, const RetrievedMemory&) = default;
};

// Rubric weights ---------------------------------------------------------------

/// Rescales weights to sum to 1, keeping order. Throws Errc::empty_rubric for no
/// items, Errc::precondition for a negative or non-finite weight, and
/// Errc::degenerate_weights when every weight is zero.
std::vector<RubricItem> normalize_weights(std::span<const RubricItem> items);

/// Builds a rubric from raw proposer output: merges duplicate criteria (first
/// text wins, weights summed), truncates to max_items, then normalizes. All-zero
/// weights fall back to uniform 1/K with a logged warning.
Rubric make_rubric(std::string query_id, std::span<const RubricItem> raw,
                   std::size_t max_items = kDefaultMaxRubricItems,
                   std::optional<Provenance> provenance = std::nullopt);

/// Rubric with equal weights over the given criteria (duplicates merged).
Rubric uniform_rubric(std::string query_id, std::span<const std::string> criteria);

// Criterion identity -----------------------------------------------------------

/// Lowercases, collapses whitespace runs, and strips surrounding whitespace and
/// punctuation. Throws Errc::empty_criterion if nothing is left.
CriterionKey canonicalize(std::string_view criterion);

std::string_view to_string(Split) noexcept;
std::string_view to_string(Origin) noexcept;
std::string_view to_string(ProposalMode) noexcept;
std::string_view to_string(VerifierMode) noexcept;

// JSON -------------------------------------------------------------------------

void to_json(nlohmann::json& j, const Query& v);
void from_json(const nlohmann::json& j, Query& v);
void to_json(nlohmann::json& j, const ReferenceAnswer& v);
void from_json(const nlohmann::json& j, ReferenceAnswer& v);
void to_json(nlohmann::json& j, const Candidate& v);
void from_json(const nlohmann::json& j, Candidate& v);
void to_json(nlohmann::json& j, const CandidatePool& v);
void from_json(const nlohmann::json& j, CandidatePool& v);
void to_json(nlohmann::json& j, const RubricItem& v);
void from_json(const nlohmann::json& j, RubricItem& v);
void to_json(nlohmann::json& j, const CriterionKey& v);
void from_json(const nlohmann::json& j, CriterionKey& v);
void to_json(nlohmann::json& j, const Provenance& v);
void from_json(const nlohmann::json& j, Provenance& v);
void to_json(nlohmann::json& j, const Rubric& v);
void from_json(const nlohmann::json& j, Rubric& v);
void to_json(nlohmann::json& j, const RetrievedItem& v);
void from_json(const nlohmann::json& j, RetrievedItem& v);
void to_json(nlohmann::json& j, const CategorySelection& v);
void from_json(const nlohmann::json& j, CategorySelection& v);
void to_json(nlohmann::json& j, const RetrievedMemory& v);
void from_json(const nlohmann::json& j, RetrievedMemory& v);

// Enums serialize as their to_string names; unknown names throw Errc::data.
void to_json(nlohmann::json& j, Split v);
void from_json(const nlohmann::json& j, Split& v);
void to_json(nlohmann::json& j, Origin v);
void from_json(const nlohmann::json& j, Origin& v);
void to_json(nlohmann::json& j, ProposalMode v);
void from_json(const nlohmann::json& j, ProposalMode& v);
void to_json(nlohmann::json& j, VerifierMode v);
void from_json(const nlohmann::json& j, VerifierMode& v);

}  // namespace rubricmem
