#pragma once

// The tunable memory bank: category -> criterion -> entry, merged with item
// rewards and retrieved per category (top fraction by mean reward).

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/domain.hpp"
#include "rubricmem/ports.hpp"

namespace rubricmem::memory {

inline constexpr int kSnapshotSchemaVersion = 1;
inline constexpr const char* kSnapshotSchemaId = "rubricmem.memory_bank";
inline constexpr double kDefaultRetrievalFraction = 0.5;
inline constexpr std::size_t kDefaultEvidenceCap = 5;

/// (round, iteration) stamp. Ordered by round first.
struct Stamp {
    int round = 0;
    std::int64_t iteration = 0;

    friend auto operator<=>(const Stamp&, const Stamp&) = default;
};

struct RewardSample {
    double alpha = 0.0;
    Stamp at;

    friend bool operator==(const RewardSample&, const RewardSample&) = default;
};

struct MemoryEntry {
    std::string criterion;
    CriterionKey key;
    std::vector<RewardSample> reward_history;
    double mean_reward = 0.0;
    std::vector<std::string> evidence;  // query ids, deduplicated, insertion order
    Stamp created_at;

    friend bool operator==(const MemoryEntry&, const MemoryEntry&) = default;
};

/// Arithmetic mean of the history, summed front to back.
double history_mean(const std::vector<RewardSample>& history) noexcept;

struct Category {
    std::string name;
    std::map<CriterionKey, MemoryEntry> entries;

    friend bool operator==(const Category&, const Category&) = default;
};

enum class UpdateOutcome { created, merged, merged_into_existing_category };

class MemoryBank {
  public:
    MemoryBank() = default;

    /// Categories in creation order.
    [[nodiscard]] const std::vector<Category>& categories() const noexcept { return categories_; }
    [[nodiscard]] std::vector<std::string> category_names() const;
    [[nodiscard]] std::size_t entry_count() const noexcept;
    [[nodiscard]] bool empty() const noexcept { return entry_count() == 0; }

    [[nodiscard]] std::uint64_t version() const noexcept { return version_; }
    [[nodiscard]] Stamp clock() const noexcept { return clock_; }

    /// Category currently housing `key`, if any.
    [[nodiscard]] std::optional<std::string> category_of(const CriterionKey& key) const;
    [[nodiscard]] const MemoryEntry* find(const CriterionKey& key) const;
    [[nodiscard]] const Category* category(std::string_view name) const;

    /// Moves the (round, iteration) clock forward. Throws Errc::precondition on
    /// any attempt to move it backwards.
    void advance(Stamp to);

    /// Merges one item reward: creates the entry (and category) if absent,
    /// otherwise appends to its history, recomputes the mean and appends the
    /// evidence query if new. A key already housed elsewhere stays in its
    /// original category (logged). Bumps the version.
    UpdateOutcome update(const std::string& category, std::string_view criterion, double alpha,
                         const std::string& evidence_query);

    friend bool operator==(const MemoryBank&, const MemoryBank&) = default;

    // Snapshot support; restores every field verbatim.
    friend void to_json(nlohmann::json& j, const MemoryBank& bank);
    friend void from_json(const nlohmann::json& j, MemoryBank& bank);

  private:
    Category& category_for_insert(const std::string& name);

    std::vector<Category> categories_;
    std::map<CriterionKey, std::string> housing_;
    Stamp clock_;
    std::uint64_t version_ = 0;
};

/// Category for a criterion: the housing category if its key is already in the
/// bank (no categorizer call), otherwise whatever the categorizer picks given
/// the bank's current category names.
std::string assign_category(const MemoryBank& bank, std::string_view criterion, ports::Categorizer& categorizer);

struct RetrievalOptions {
    double fraction = kDefaultRetrievalFraction;
    std::size_t evidence_cap = kDefaultEvidenceCap;
};

/// Number of entries kept out of m for the given fraction: ceil(fraction * m),
/// at least 1 when m > 0.
std::size_t retained_count(std::size_t m, double fraction) noexcept;

/// Per category, keeps the top retained_count entries by mean reward (ties:
/// earlier creation stamp, then key) and renders them for the proposer.
RetrievedMemory retrieve(const MemoryBank& bank, RetrievalOptions options = {});

/// Deterministic text block listing categories in creation order.
std::string render(const std::vector<CategorySelection>& selections, std::size_t evidence_cap);

/// Writes the bank as versioned JSON.
void snapshot(const MemoryBank& bank, const std::string& path);
std::string snapshot_string(const MemoryBank& bank);

/// Throws Errc::corrupt_snapshot for unreadable/invalid files and
/// Errc::version_mismatch for an unknown schema version.
MemoryBank load(const std::string& path);
MemoryBank load_string(std::string_view text);

/// Recomputes every invariant (means, housing, evidence dedup). Returns a list
/// of violations; empty means healthy.
std::vector<std::string> check_integrity(const MemoryBank& bank);

void to_json(nlohmann::json& j, const Stamp& v);
void from_json(const nlohmann::json& j, Stamp& v);
void to_json(nlohmann::json& j, const MemoryEntry& v);
void from_json(const nlohmann::json& j, MemoryEntry& v);

}  // namespace rubricmem::memory
