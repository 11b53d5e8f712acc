#pragma once

// Inner memory-tuning loop and outer adversarial refresh loop.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/domain.hpp"
#include "rubricmem/memory.hpp"
#include "rubricmem/ports.hpp"
#include "rubricmem/verify.hpp"

namespace rubricmem::loop {

struct ConvergenceConfig {
    int window = 3;
    double min_delta = 0.01;
    int patience = 2;
};

struct TuningConfig {
    int examples = 8;  // I
    int candidates = 4;  // J
    int warmup_passes = 1;
    double fraction = memory::kDefaultRetrievalFraction;
    std::size_t evidence_cap = memory::kDefaultEvidenceCap;
    int repetitions = 3;
    VerifierMode verifier_mode = VerifierMode::scalar;
    ConvergenceConfig convergence;
    std::int64_t max_inner_iterations = 64;  // per round
    int max_outer_rounds = 3;
    /// Held-out share of I used for validation when the dataset has no
    /// validation-split queries.
    double validation_fraction = 0.25;
    std::uint64_t seed = 7;
    double temperature = 1.0;
    double nucleus_p = 1.0;
    std::size_t max_concurrency = 4;
    std::size_t max_rubric_items = kDefaultMaxRubricItems;

    /// Throws Errc::config on out-of-range values.
    void validate() const;

    [[nodiscard]] memory::RetrievalOptions retrieval() const { return {fraction, evidence_cap}; }
    [[nodiscard]] verify::ScoringOptions scoring() const { return {verifier_mode, repetitions, max_concurrency}; }
};

void to_json(nlohmann::json& j, const TuningConfig& v);
void from_json(const nlohmann::json& j, TuningConfig& v);

using PoolMap = std::map<std::string, CandidatePool>;

/// Tuning examples (exactly I, each with a reference) plus held-out
/// validation queries.
struct Dataset {
    std::vector<Query> tuning;
    std::vector<Query> validation;
    std::map<std::string, ReferenceAnswer> references;

    [[nodiscard]] const ReferenceAnswer& reference(const std::string& query_id) const;
    /// tuning followed by validation.
    [[nodiscard]] std::vector<Query> all() const;
};

/// Picks the first I tuning-split queries as examples. Validation comes from
/// validation-split queries when present, otherwise from tuning-split queries
/// beyond the first I, otherwise max(1, round(fraction * I)) examples are
/// taken from the end of the I (which then shrinks). Throws Errc::config when
/// there are no tuning queries or a reference is missing.
Dataset select_dataset(std::span<const Query> queries, std::span<const ReferenceAnswer> references,
                       const TuningConfig& config);

struct ItemAlpha {
    std::string criterion;
    double alpha = 0.0;
};

struct IterationMetrics {
    std::int64_t t = 0;
    int s = 0;
    std::string query_id;
    ProposalMode mode = ProposalMode::contrastive;
    bool skipped = false;
    std::string error;  // reason when skipped
    std::vector<ItemAlpha> items;
    double mean_alpha = 0.0;
    std::optional<double> validation_mean_alpha;
    std::uint64_t bank_version = 0;
};

void to_json(nlohmann::json& j, const IterationMetrics& v);
void from_json(const nlohmann::json& j, IterationMetrics& v);

struct InnerResult {
    memory::MemoryBank bank;
    std::vector<IterationMetrics> metrics;
    std::vector<double> validation_curve;
    bool converged = false;
    std::int64_t next_t = 1;
};

struct RoundResult {
    int s = 0;
    std::uint64_t bank_version = 0;
    std::map<std::string, Rubric> rubrics;
    std::vector<double> validation_curve;
    bool converged = false;
    /// Queries whose pool was carried forward because the adversary failed.
    std::vector<std::string> carried_forward;
};

void to_json(nlohmann::json& j, const RoundResult& v);

/// Everything needed to start (or resume) an outer round.
struct LoopState {
    memory::MemoryBank bank;
    PoolMap pools;
    int round = 0;
    std::int64_t next_t = 1;

    friend bool operator==(const LoopState&, const LoopState&) = default;
};

void to_json(nlohmann::json& j, const LoopState& v);
void from_json(const nlohmann::json& j, LoopState& v);

/// Hooks for persistence; the engine itself never touches the filesystem.
class Observer {
  public:
    virtual ~Observer() = default;
    virtual void on_round_start(const LoopState&) {}
    virtual void on_item_rewards(std::span<const verify::ItemRewardRecord>) {}
    virtual void on_iteration(const IterationMetrics&, const memory::MemoryBank&) {}
    /// Called after round rubrics are built and before pools are refreshed.
    virtual void on_round_end(const RoundResult&, const PoolMap& /*old_pools*/) {}
};

struct DualLoopResult {
    LoopState final_state;
    std::vector<RoundResult> rounds;
    std::vector<IterationMetrics> metrics;
};

/// Whether iteration t of round s is a contrastive warm-up step.
bool is_warmup(const TuningConfig& config, int s, std::int64_t t) noexcept;

class Engine {
  public:
    /// `ports` must already be guarded.
    Engine(ports::ModelPorts ports, TuningConfig config, Observer* observer = nullptr);

    [[nodiscard]] const TuningConfig& config() const noexcept { return config_; }
    verify::Scorer& scorer() noexcept { return scorer_; }

    /// J base answers per query from the answer model.
    PoolMap initial_pools(std::span<const Query> queries);
    LoopState initial_state(const Dataset& dataset);

    /// Runs iterations first_t .. until convergence or max_inner_iterations.
    /// Pools are read-only.
    InnerResult run_inner(const Dataset& dataset, const PoolMap& pools, memory::MemoryBank bank, int round,
                          std::int64_t first_t);

    /// Mean item reward of memory-driven proposals on the validation queries.
    /// nullopt when no validation proposal succeeded.
    std::optional<double> validation_alpha(const Dataset& dataset, const PoolMap& pools,
                                           const memory::MemoryBank& bank, int round);

    /// One rubric per query from a single retrieval of `bank`; failed
    /// queries are skipped with a warning.
    std::map<std::string, Rubric> make_round_rubrics(std::span<const Query> queries, const PoolMap& pools,
                                                     const memory::MemoryBank& bank, int round);

    /// J adversarial candidates per query stamped round + 1. On adversary
    /// failure the old pool is carried forward (round stamp incremented,
    /// candidates untouched) and its id appended to `carried_forward`.
    PoolMap refresh_candidates(std::span<const Query> queries, const std::map<std::string, Rubric>& rubrics,
                               const PoolMap& old_pools, int round, std::vector<std::string>* carried_forward = nullptr);

    DualLoopResult run_dual_loop(const Dataset& dataset, LoopState state);

  private:
    struct Attempt;
    Attempt attempt_iteration(const Query& query, const ReferenceAnswer& reference, const CandidatePool& pool,
                              const memory::MemoryBank& bank, int s, std::int64_t t, bool warmup);
    ports::Decoding decoding(std::string_view purpose, int s, std::int64_t t, std::string_view query_id,
                      bool greedy) const;

    ports::ModelPorts ports_;
    TuningConfig config_;
    Observer* observer_;
    verify::Scorer scorer_;
};

/// Digest over every pool's candidates, for immutability checks.
std::string pools_digest(const PoolMap& pools);

}  // namespace rubricmem::loop
