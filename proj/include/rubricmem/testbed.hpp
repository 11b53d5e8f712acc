#pragma once

// Deterministic synthetic instantiation of every model port. Answers are sets
// of tagged attributes rendered as text ("attributes: a b c"), criteria are
// predicates "has:<tag>" / "not:<tag>", and every decision is a pure function
// of (world, request, seed), so loop dynamics can be checked against
// brute-force oracles.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/domain.hpp"
#include "rubricmem/ports.hpp"

namespace rubricmem::testbed {

inline constexpr std::size_t kMaxUniverse = 64;
inline constexpr std::size_t kMaxEnumerableUniverse = 16;

/// Bit i set <=> attribute i of the universe is present.
using AttrSet = std::uint64_t;

struct AttributeGroup {
    std::string name;
    std::vector<std::string> attributes;
};

/// How base answers deviate from a reference: each target attribute is dropped
/// with miss_prob, each off-target attribute added with extra_prob.
struct DistractorParams {
    double miss_prob = 0.5;
    double extra_prob = 0.2;
};

struct WorldQuery {
    std::string id;
    std::string text;
    Split split = Split::tuning;
    std::vector<std::string> target;
};

class SyntheticWorld {
  public:
    /// Validates: groups partition the universe (no repeats), tags are
    /// lowercase and whitespace-free, targets are subsets, |universe| <= 64.
    static SyntheticWorld from_json(const nlohmann::json& j);
    static SyntheticWorld load(const std::string& path);

    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] const std::vector<AttributeGroup>& groups() const noexcept { return groups_; }
    [[nodiscard]] const std::vector<WorldQuery>& queries() const noexcept { return queries_; }
    [[nodiscard]] const std::vector<std::string>& universe() const noexcept { return universe_; }
    [[nodiscard]] std::size_t size() const noexcept { return universe_.size(); }

    [[nodiscard]] std::optional<std::size_t> index_of(std::string_view tag) const;
    [[nodiscard]] const std::string& group_of(std::size_t attribute) const;
    [[nodiscard]] const DistractorParams& distractors_for(std::size_t attribute) const;

    [[nodiscard]] const WorldQuery* query(std::string_view id) const;
    /// Target profile of a query; throws Errc::data for unknown ids.
    [[nodiscard]] AttrSet target(std::string_view query_id) const;
    /// Mask of all attributes in a group.
    [[nodiscard]] AttrSet group_mask(std::string_view group) const;

    [[nodiscard]] std::string render(AttrSet attrs) const;
    /// Parses "attributes: a b" text; nullopt on a wrong prefix or unknown tag.
    [[nodiscard]] std::optional<AttrSet> parse(std::string_view text) const;

    [[nodiscard]] Query as_query(const WorldQuery& q) const { return Query{q.id, q.text, q.split}; }
    [[nodiscard]] ReferenceAnswer reference(const WorldQuery& q) const;

    [[nodiscard]] nlohmann::json to_json() const;

  private:
    std::string name_;
    std::uint64_t seed_ = 0;
    std::vector<AttributeGroup> groups_;
    std::vector<WorldQuery> queries_;
    DistractorParams default_distractors_;
    std::map<std::string, DistractorParams> group_distractors_;
    std::vector<std::string> universe_;
    std::vector<std::size_t> group_index_;  // attribute -> group
};

enum class Polarity { has, lacks };

struct PredicateCriterion {
    Polarity polarity = Polarity::has;
    std::size_t attribute = 0;

    [[nodiscard]] bool holds(AttrSet attrs) const noexcept {
        const bool present = (attrs >> attribute) & 1U;
        return polarity == Polarity::has ? present : !present;
    }

    friend auto operator<=>(const PredicateCriterion&, const PredicateCriterion&) = default;
};

/// "has:<tag>" or "not:<tag>", case/punctuation-insensitive via canonicalize.
std::optional<PredicateCriterion> parse_predicate(const SyntheticWorld& world, std::string_view criterion);
std::string predicate_text(const SyntheticWorld& world, PredicateCriterion p);
/// has:a, not:a for every attribute, in universe order.
std::vector<PredicateCriterion> all_predicates(const SyntheticWorld& world);

/// Exact predicate evaluation: 1 if the criterion holds on the answer, else 0.
/// Unparseable criteria score 0 (with a warning).
double synth_verify(const SyntheticWorld& world, AttrSet answer, std::string_view criterion);

/// Empirical gap of a predicate: holds(ref) - mean over pool of holds(o).
double predicate_gap(PredicateCriterion p, AttrSet reference, std::span<const AttrSet> pool);

struct OracleResult {
    Rubric rubric;
    double gap = 0.0;
    std::vector<double> item_gaps;
};

/// Exhaustive best uniform-weight K-item predicate rubric for one query/pool.
/// Throws Errc::universe_too_large beyond 16 attributes.
OracleResult oracle_best_rubric(const SyntheticWorld& world, std::string_view query_id, AttrSet reference,
                                std::span<const AttrSet> pool, std::size_t k);

struct SyntheticSettings {
    /// Items per proposed rubric (G).
    std::size_t rubric_size = 4;
    /// Exploration rate per outer round; the last value repeats.
    std::vector<double> epsilon_by_round{0.1};
    /// 0 = exact binary verifier; > 0 mixes in seeded uniform noise (scalar).
    double verifier_noise = 0.0;

    [[nodiscard]] double epsilon(int round) const noexcept;
};

/// All five ports over one world.
class SyntheticBackend final : public ports::RubricProposer,
                               public ports::Verifier,
                               public ports::Categorizer,
                               public ports::Adversary,
                               public ports::AnswerModel,
                               public std::enable_shared_from_this<SyntheticBackend> {
  public:
    SyntheticBackend(std::shared_ptr<const SyntheticWorld> world, SyntheticSettings settings);

    static std::shared_ptr<SyntheticBackend> create(std::shared_ptr<const SyntheticWorld> world,
                                                    SyntheticSettings settings = {}) {
        return std::make_shared<SyntheticBackend>(std::move(world), std::move(settings));
    }

    [[nodiscard]] ports::ModelPorts ports();
    [[nodiscard]] const SyntheticWorld& world() const noexcept { return *world_; }
    [[nodiscard]] const SyntheticSettings& settings() const noexcept { return settings_; }

    Rubric propose(const ports::ProposerRequest& req) override;
    double verify(const ports::VerifierRequest& req) override;
    std::string categorize(const ports::CategorizerRequest& req) override;
    CandidatePool generate_adversarial(const ports::AdversaryRequest& req) override;
    CandidatePool generate_answers(const ports::AnswerRequest& req) override;

    /// Best-response attribute set for a rubric (exposed for tests).
    AttrSet best_response(AttrSet reference, const Rubric& rubric, std::uint64_t seed) const;

  private:
    AttrSet parse_or_throw(std::string_view text) const;
    Rubric propose_contrastive(const ports::ProposerRequest& req) const;
    Rubric propose_from_memory(const ports::ProposerRequest& req) const;

    std::shared_ptr<const SyntheticWorld> world_;
    SyntheticSettings settings_;
};

// Fault injection --------------------------------------------------------------

struct FaultPlan {
    double timeout_rate = 0.0;
    double malformed_rate = 0.0;
    /// Verifier only: half the hits land inside the clamp slack, half far out.
    double out_of_range_rate = 0.0;
    /// Proposals for these queries always come back malformed.
    std::set<std::string> poisoned_queries;
    std::uint64_t seed = 0;
};

/// Wraps raw ports and injects failures decided by hashing (request, attempt),
/// so the injected pattern is independent of thread scheduling. Counts every
/// attempted call.
class FaultInjector {
  public:
    FaultInjector(ports::ModelPorts inner, FaultPlan plan);

    [[nodiscard]] ports::ModelPorts ports() const;
    [[nodiscard]] std::size_t attempts() const noexcept;
    [[nodiscard]] std::size_t injected() const noexcept;

    struct Shared;

  private:
    std::shared_ptr<Shared> shared_;
};

/// Parses the "synthetic" settings block of a run config.
SyntheticSettings settings_from_json(const nlohmann::json& j);
FaultPlan fault_plan_from_json(const nlohmann::json& j);

}  // namespace rubricmem::testbed
