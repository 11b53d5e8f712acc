#include "rubricmem/verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "rubricmem/digest.hpp"
#include "rubricmem/errors.hpp"
#include "rubricmem/parallel.hpp"

namespace rubricmem::verify {

ScoreTrace make_trace(std::string query_id, std::string answer_digest, CriterionKey key,
                      std::vector<double> scores, bool partial) {
    if (scores.empty()) throw Error(Errc::precondition, "a score trace needs at least one repetition");
    double sum = 0.0;
    for (double s : scores) sum += s;
    const double mean = sum / static_cast<double>(scores.size());
    double sq = 0.0;
    for (double s : scores) sq += (s - mean) * (s - mean);
    const double std = std::sqrt(sq / static_cast<double>(scores.size()));
    return ScoreTrace{std::move(query_id), std::move(answer_digest), std::move(key), std::move(scores),
                      mean, std, partial};
}

double rubric_gap(const Rubric& rubric, std::span<const double> item_gaps) {
    if (rubric.items.size() != item_gaps.size()) {
        throw Error(Errc::mismatched_items, std::to_string(rubric.items.size()) + " items but " +
                                                std::to_string(item_gaps.size()) + " gaps");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < item_gaps.size(); ++k) total += rubric.items[k].weight * item_gaps[k];
    return total;
}

double preference_outcome(double score_ref, double score_cand) noexcept {
    if (std::abs(score_ref - score_cand) <= kTieTolerance) return 0.5;
    return score_ref > score_cand ? 1.0 : 0.0;
}

ItemRewardRecord reward_from_traces(std::string criterion, std::string query_id, ScoreTrace reference,
                                    std::vector<ScoreTrace> candidates, VerifierMode mode) {
    if (candidates.empty()) throw Error(Errc::empty_pool, "item reward needs at least one candidate");
    double cand_sum = 0.0;
    double std_sum = reference.std;
    for (const auto& c : candidates) {
        cand_sum += c.mean;
        std_sum += c.std;
    }
    ItemRewardRecord rec;
    rec.key = canonicalize(criterion);
    rec.criterion = std::move(criterion);
    rec.query_id = std::move(query_id);
    rec.gap = reference.mean - cand_sum / static_cast<double>(candidates.size());
    rec.sigma = mode == VerifierMode::binary ? 0.0 : std_sum / static_cast<double>(candidates.size() + 1);
    rec.alpha = rec.gap - rec.sigma;
    rec.reference = std::move(reference);
    rec.candidates = std::move(candidates);
    return rec;
}

// Scorer -----------------------------------------------------------------------

Scorer::Scorer(std::shared_ptr<ports::Verifier> verifier, ScoringOptions options)
    : verifier_(std::move(verifier)), options_(options) {
    if (!verifier_) throw Error(Errc::precondition, "scorer needs a verifier");
    if (options_.repetitions < 1) throw Error(Errc::precondition, "repetitions must be >= 1");
}

int Scorer::effective_repetitions(int requested) const noexcept {
    if (options_.mode == VerifierMode::binary) return 1;
    return requested < 1 ? 1 : requested;
}

std::string Scorer::cache_key(const Job& job) const {
    return digest_parts({job.query->id, job.answer, job.criterion, to_string(options_.mode),
                         std::to_string(job.sample)});
}

std::vector<Scorer::Outcome> Scorer::run(std::span<const Job> jobs) {
    std::vector<Outcome> out(jobs.size());
    std::vector<std::string> keys(jobs.size());
    std::vector<std::size_t> pending;
    {
        std::lock_guard lock(mutex_);
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            keys[i] = cache_key(jobs[i]);
            if (auto it = cache_.find(keys[i]); it != cache_.end()) {
                out[i].score = it->second;
            } else {
                pending.push_back(i);
            }
        }
    }
    parallel_for(pending.size(), options_.max_concurrency, [&](std::size_t p) {
        const std::size_t i = pending[p];
        const Job& job = jobs[i];
        ports::VerifierRequest req{*job.query, std::string(job.answer), std::string(job.criterion),
                                   options_.mode, job.sample};
        try {
            const double score = verifier_->verify(req);
            out[i].score = score;
            std::lock_guard lock(mutex_);
            ++calls_;
            cache_.emplace(keys[i], score);
        } catch (...) {
            out[i].error = std::current_exception();
        }
    });
    return out;
}

ScoreTrace Scorer::collect(const Query& query, std::string_view answer, std::string_view criterion,
                           std::span<const Outcome> outcomes) const {
    std::vector<double> scores;
    std::exception_ptr first_error;
    for (const auto& o : outcomes) {
        if (o.score) {
            scores.push_back(*o.score);
        } else if (!first_error) {
            first_error = o.error;
        }
    }
    if (scores.empty()) std::rethrow_exception(first_error);
    const bool partial = scores.size() < outcomes.size();
    if (partial) {
        spdlog::warn("partial trace for query {} criterion '{}': {}/{} repetitions succeeded", query.id,
                     criterion, scores.size(), outcomes.size());
    }
    return make_trace(query.id, digest(answer), canonicalize(criterion), std::move(scores), partial);
}

ScoreTrace Scorer::score_item(const Query& query, std::string_view answer, std::string_view criterion, int n) {
    if (answer.empty() || criterion.empty()) {
        throw Error(Errc::precondition, "scoring needs a non-empty answer and criterion");
    }
    const int reps = effective_repetitions(n);
    std::vector<Job> jobs;
    for (int r = 0; r < reps; ++r) jobs.push_back({&query, answer, criterion, static_cast<std::uint32_t>(r)});
    const auto outcomes = run(jobs);
    return collect(query, answer, criterion, outcomes);
}

ItemRewardRecord Scorer::item_reward(const Query& query, const ReferenceAnswer& reference, const CandidatePool& pool,
                                     std::string_view criterion, int n) {
    const std::string c(criterion);
    auto records = item_rewards(query, reference, pool, std::span<const std::string>(&c, 1), n);
    return std::move(records.front());
}

std::vector<ItemRewardRecord> Scorer::item_rewards(const Query& query, const ReferenceAnswer& reference,
                                                   const CandidatePool& pool,
                                                   std::span<const std::string> criteria, int n) {
    if (pool.candidates.empty()) throw Error(Errc::empty_pool, "candidate pool for " + query.id + " is empty");
    const int reps = effective_repetitions(n);
    const std::size_t answers = pool.candidates.size() + 1;
    auto answer_text = [&](std::size_t a) -> std::string_view {
        return a == 0 ? std::string_view(reference.text) : std::string_view(pool.candidates[a - 1].text);
    };

    // Job layout: [criterion][answer][repetition], reduced in the same order.
    std::vector<Job> jobs;
    jobs.reserve(criteria.size() * answers * static_cast<std::size_t>(reps));
    for (const auto& c : criteria) {
        for (std::size_t a = 0; a < answers; ++a) {
            for (int r = 0; r < reps; ++r) {
                jobs.push_back({&query, answer_text(a), c, static_cast<std::uint32_t>(r)});
            }
        }
    }
    const auto outcomes = run(jobs);

    std::vector<ItemRewardRecord> records;
    records.reserve(criteria.size());
    std::size_t offset = 0;
    for (const auto& c : criteria) {
        std::vector<ScoreTrace> traces;
        traces.reserve(answers);
        for (std::size_t a = 0; a < answers; ++a) {
            std::span<const Outcome> slice(outcomes.data() + offset, static_cast<std::size_t>(reps));
            traces.push_back(collect(query, answer_text(a), c, slice));
            offset += static_cast<std::size_t>(reps);
        }
        ScoreTrace ref = std::move(traces.front());
        traces.erase(traces.begin());
        records.push_back(reward_from_traces(c, query.id, std::move(ref), std::move(traces), options_.mode));
    }
    return records;
}

RubricScore Scorer::rubric_score(const Query& query, std::string_view answer, const Rubric& rubric, int n) {
    const int reps = effective_repetitions(n);
    std::vector<Job> jobs;
    for (const auto& item : rubric.items) {
        for (int r = 0; r < reps; ++r) {
            jobs.push_back({&query, answer, item.criterion, static_cast<std::uint32_t>(r)});
        }
    }
    const auto outcomes = run(jobs);
    RubricScore out;
    for (std::size_t k = 0; k < rubric.items.size(); ++k) {
        std::span<const Outcome> slice(outcomes.data() + k * static_cast<std::size_t>(reps),
                                       static_cast<std::size_t>(reps));
        const auto trace = collect(query, answer, rubric.items[k].criterion, slice);
        out.items.push_back({rubric.items[k].criterion, rubric.items[k].weight, trace.mean});
        out.score += rubric.items[k].weight * trace.mean;
    }
    return out;
}

double Scorer::preference_accuracy(const Query& query, const ReferenceAnswer& reference, std::string_view candidate,
                                   const Rubric& rubric, int n) {
    const auto ref = rubric_score(query, reference.text, rubric, n);
    const auto cand = rubric_score(query, candidate, rubric, n);
    double acc = 0.0;
    for (std::size_t k = 0; k < rubric.items.size(); ++k) {
        acc += rubric.items[k].weight * preference_outcome(ref.items[k].score, cand.items[k].score);
    }
    return acc;
}

std::size_t Scorer::cache_size() const {
    std::lock_guard lock(mutex_);
    return cache_.size();
}

std::size_t Scorer::verifier_calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

void Scorer::save_cache(const std::string& path) const {
    std::vector<std::pair<std::string, double>> entries;
    {
        std::lock_guard lock(mutex_);
        entries.assign(cache_.begin(), cache_.end());
    }
    std::sort(entries.begin(), entries.end());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write score cache " + path);
    for (const auto& [key, score] : entries) out << nlohmann::json{{"key", key}, {"score", score}}.dump() << '\n';
}

void Scorer::load_cache(const std::string& path) {
    std::ifstream in(path);
    if (!in) return;
    std::string line;
    std::lock_guard lock(mutex_);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            cache_[j.at("key").get<std::string>()] = j.at("score").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::data, "malformed score cache line in " + path + ": " + e.what());
        }
    }
}

void to_json(nlohmann::json& j, const ScoreTrace& v) {
    j = {{"query_id", v.query_id},       {"answer_digest", v.answer_digest}, {"criterion_key", v.key},
         {"repetitions", v.repetitions}, {"mean", v.mean},                   {"std", v.std}};
    if (v.partial) j["partial"] = true;
}

void from_json(const nlohmann::json& j, ScoreTrace& v) {
    v.query_id = j.at("query_id").get<std::string>();
    v.answer_digest = j.at("answer_digest").get<std::string>();
    v.key = j.at("criterion_key").get<CriterionKey>();
    v.repetitions = j.at("repetitions").get<std::vector<double>>();
    v.mean = j.at("mean").get<double>();
    v.std = j.at("std").get<double>();
    v.partial = j.value("partial", false);
}

void to_json(nlohmann::json& j, const ItemRewardRecord& v) {
    j = {{"criterion_key", v.key}, {"criterion", v.criterion}, {"query_id", v.query_id},
         {"round", v.round},       {"iteration", v.iteration}, {"gap", v.gap},
         {"sigma", v.sigma},       {"alpha", v.alpha},         {"reference", v.reference},
         {"candidates", v.candidates}};
}

void from_json(const nlohmann::json& j, ItemRewardRecord& v) {
    v.key = j.at("criterion_key").get<CriterionKey>();
    v.criterion = j.at("criterion").get<std::string>();
    v.query_id = j.at("query_id").get<std::string>();
    v.round = j.at("round").get<int>();
    v.iteration = j.at("iteration").get<std::int64_t>();
    v.gap = j.at("gap").get<double>();
    v.sigma = j.at("sigma").get<double>();
    v.alpha = j.at("alpha").get<double>();
    v.reference = j.at("reference").get<ScoreTrace>();
    v.candidates = j.at("candidates").get<std::vector<ScoreTrace>>();
}

}  // namespace rubricmem::verify
