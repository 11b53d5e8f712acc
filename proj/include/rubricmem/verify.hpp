#pragma once

// Scoring mathematics: repeated verification traces, per-item rewards (gap
// minus the verifiability penalty), rubric-level gap and score, and the
// preference-accuracy metric.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <exception>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/domain.hpp"
#include "rubricmem/ports.hpp"

namespace rubricmem::verify {

inline constexpr double kTieTolerance = 1e-9;

struct ScoreTrace {
    std::string query_id;
    std::string answer_digest;
    CriterionKey key;
    std::vector<double> repetitions;
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
    bool partial = false;  // some repetitions failed and were dropped
};

/// Builds a trace from raw repetition scores. Throws Errc::precondition when
/// `scores` is empty.
ScoreTrace make_trace(std::string query_id, std::string answer_digest, CriterionKey key,
                      std::vector<double> scores, bool partial = false);

struct ItemRewardRecord {
    CriterionKey key;
    std::string criterion;
    std::string query_id;
    int round = 0;
    std::int64_t iteration = 0;
    double gap = 0.0;
    double sigma = 0.0;
    double alpha = 0.0;  // gap - sigma
    ScoreTrace reference;
    std::vector<ScoreTrace> candidates;
};

/// Weighted sum of per-item gaps. Throws Errc::mismatched_items on a size mismatch.
double rubric_gap(const Rubric& rubric, std::span<const double> item_gaps);

/// 1 if the reference scores higher, 0.5 on a tie (within kTieTolerance), else 0.
double preference_outcome(double score_ref, double score_cand) noexcept;

/// Item reward from already computed traces. sigma is the mean trace std over
/// the reference and all candidates in scalar mode and 0 in binary mode.
ItemRewardRecord reward_from_traces(std::string criterion, std::string query_id, ScoreTrace reference,
                                    std::vector<ScoreTrace> candidates, VerifierMode mode);

struct ScoringOptions {
    VerifierMode mode = VerifierMode::scalar;
    int repetitions = 3;
    std::size_t max_concurrency = 4;
};

/// Per-item result of scoring one answer against a rubric.
struct ItemScore {
    std::string criterion;
    double weight = 0.0;
    double score = 0.0;
};

struct RubricScore {
    double score = 0.0;
    std::vector<ItemScore> items;
};

/// Fans verifier calls out in parallel and caches every (query, answer,
/// criterion, mode, sample) evaluation by digest for the lifetime of the object,
/// so the same evaluation feeds item rewards, rubric scores and preferences.
class Scorer {
  public:
    Scorer(std::shared_ptr<ports::Verifier> verifier, ScoringOptions options);

    [[nodiscard]] const ScoringOptions& options() const noexcept { return options_; }

    /// Repetitions actually used for a requested count (1 in binary mode).
    [[nodiscard]] int effective_repetitions(int requested) const noexcept;

    ScoreTrace score_item(const Query& query, std::string_view answer, std::string_view criterion, int n);
    ScoreTrace score_item(const Query& query, std::string_view answer, std::string_view criterion) {
        return score_item(query, answer, criterion, options_.repetitions);
    }

    ItemRewardRecord item_reward(const Query& query, const ReferenceAnswer& reference, const CandidatePool& pool,
                                 std::string_view criterion, int n);

    /// Rewards for every item of a rubric, all verifier calls fanned out together.
    std::vector<ItemRewardRecord> item_rewards(const Query& query, const ReferenceAnswer& reference,
                                               const CandidatePool& pool, std::span<const std::string> criteria,
                                               int n);

    RubricScore rubric_score(const Query& query, std::string_view answer, const Rubric& rubric, int n);
    double rubric_score_value(const Query& query, std::string_view answer, const Rubric& rubric, int n) {
        return rubric_score(query, answer, rubric, n).score;
    }

    double preference_accuracy(const Query& query, const ReferenceAnswer& reference, std::string_view candidate,
                               const Rubric& rubric, int n);

    [[nodiscard]] std::size_t cache_size() const;
    [[nodiscard]] std::size_t verifier_calls() const;

    /// Cache persistence as JSONL of {"key", "score"}. load_cache ignores a
    /// missing file and throws Errc::data on malformed lines.
    void save_cache(const std::string& path) const;
    void load_cache(const std::string& path);

  private:
    struct Job {
        const Query* query;
        std::string_view answer;
        std::string_view criterion;
        std::uint32_t sample;
    };

    struct Outcome {
        std::optional<double> score;
        std::exception_ptr error;
    };

    /// Evaluates all jobs, cache first; failures are reported per job.
    std::vector<Outcome> run(std::span<const Job> jobs);

    /// Folds the n outcomes of one (answer, criterion) pair into a trace.
    /// Throws the first error when every repetition failed.
    ScoreTrace collect(const Query& query, std::string_view answer, std::string_view criterion,
                       std::span<const Outcome> outcomes) const;

    std::string cache_key(const Job& job) const;

    std::shared_ptr<ports::Verifier> verifier_;
    ScoringOptions options_;
    mutable std::mutex mutex_;
    std::unordered_map<std::string, double> cache_;
    std::size_t calls_ = 0;
};

void to_json(nlohmann::json& j, const ScoreTrace& v);
void from_json(const nlohmann::json& j, ScoreTrace& v);
void to_json(nlohmann::json& j, const ItemRewardRecord& v);
void from_json(const nlohmann::json& j, ItemRewardRecord& v);

}  // namespace rubricmem::verify
