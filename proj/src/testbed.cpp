#include "rubricmem/testbed.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rubricmem/digest.hpp"
#include "rubricmem/errors.hpp"

namespace rubricmem::testbed {

namespace {

constexpr std::string_view kAnswerPrefix = "attributes:";
constexpr double kGapEps = 1e-12;

bool valid_tag(std::string_view tag) {
    if (tag.empty()) return false;
    return std::all_of(tag.begin(), tag.end(), [](unsigned char c) {
        return std::islower(c) || std::isdigit(c) || c == '_' || c == '-';
    });
}

DistractorParams distractors_from_json(const nlohmann::json& j, DistractorParams fallback) {
    DistractorParams d = fallback;
    d.miss_prob = j.value("miss_prob", d.miss_prob);
    d.extra_prob = j.value("extra_prob", d.extra_prob);
    if (d.miss_prob < 0 || d.miss_prob > 1 || d.extra_prob < 0 || d.extra_prob > 1) {
        throw Error(Errc::config, "distractor probabilities must lie in [0, 1]");
    }
    return d;
}

template <typename T>
void seeded_shuffle(std::vector<T>& v, SplitMix64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rng.below(i)]);
    }
}

std::string_view mode_tag(ProposalMode m) { return to_string(m); }

}  // namespace

// World ------------------------------------------------------------------------

SyntheticWorld SyntheticWorld::from_json(const nlohmann::json& j) {
    SyntheticWorld w;
    try {
        w.name_ = j.value("name", std::string("world"));
        w.seed_ = j.value("seed", std::uint64_t{0});
        for (const auto& g : j.at("groups")) {
            AttributeGroup group{g.at("name").get<std::string>(), g.at("attributes").get<std::vector<std::string>>()};
            if (group.name.empty()) throw Error(Errc::config, "attribute group without a name");
            w.groups_.push_back(std::move(group));
        }
        if (j.contains("distractors")) {
            const auto& d = j.at("distractors");
            if (d.contains("default")) w.default_distractors_ = distractors_from_json(d.at("default"), {});
            if (d.contains("groups")) {
                for (const auto& [name, params] : d.at("groups").items()) {
                    w.group_distractors_[name] = distractors_from_json(params, w.default_distractors_);
                }
            }
        }
        for (const auto& q : j.at("queries")) {
            WorldQuery wq;
            wq.id = q.at("id").get<std::string>();
            wq.text = q.value("text", "Synthetic task " + wq.id);
            wq.split = q.contains("split") ? q.at("split").get<Split>() : Split::tuning;
            wq.target = q.at("target").get<std::vector<std::string>>();
            w.queries_.push_back(std::move(wq));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, std::string("synthetic world: ") + e.what());
    }

    for (std::size_t g = 0; g < w.groups_.size(); ++g) {
        for (const auto& tag : w.groups_[g].attributes) {
            if (!valid_tag(tag)) throw Error(Errc::config, "invalid attribute tag '" + tag + "'");
            if (w.index_of(tag)) throw Error(Errc::config, "attribute '" + tag + "' listed twice");
            w.universe_.push_back(tag);
            w.group_index_.push_back(g);
        }
    }
    if (w.universe_.size() > kMaxUniverse) {
        throw Error(Errc::universe_too_large, fmt::format("{} attributes (max {})", w.universe_.size(), kMaxUniverse));
    }
    for (const auto& [name, params] : w.group_distractors_) {
        if (w.group_mask(name) == 0 && std::none_of(w.groups_.begin(), w.groups_.end(),
                                                    [&](const auto& g) { return g.name == name; })) {
            throw Error(Errc::config, "distractors for unknown group '" + name + "'");
        }
    }
    std::set<std::string> ids;
    for (const auto& q : w.queries_) {
        if (q.id.empty() || !ids.insert(q.id).second) throw Error(Errc::config, "duplicate or empty query id");
        for (const auto& tag : q.target) {
            if (!w.index_of(tag)) throw Error(Errc::config, "query " + q.id + " targets unknown attribute " + tag);
        }
    }
    return w;
}

SyntheticWorld SyntheticWorld::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::config, "cannot read world " + path);
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, path + ": " + e.what());
    }
}

std::optional<std::size_t> SyntheticWorld::index_of(std::string_view tag) const {
    for (std::size_t i = 0; i < universe_.size(); ++i) {
        if (universe_[i] == tag) return i;
    }
    return std::nullopt;
}

const std::string& SyntheticWorld::group_of(std::size_t attribute) const {
    return groups_.at(group_index_.at(attribute)).name;
}

const DistractorParams& SyntheticWorld::distractors_for(std::size_t attribute) const {
    if (auto it = group_distractors_.find(group_of(attribute)); it != group_distractors_.end()) return it->second;
    return default_distractors_;
}

const WorldQuery* SyntheticWorld::query(std::string_view id) const {
    for (const auto& q : queries_) {
        if (q.id == id) return &q;
    }
    return nullptr;
}

AttrSet SyntheticWorld::target(std::string_view query_id) const {
    const auto* q = query(query_id);
    if (!q) throw Error(Errc::data, "unknown synthetic query '" + std::string(query_id) + "'");
    AttrSet s = 0;
    for (const auto& tag : q->target) s |= AttrSet{1} << *index_of(tag);
    return s;
}

AttrSet SyntheticWorld::group_mask(std::string_view group) const {
    AttrSet s = 0;
    for (std::size_t i = 0; i < universe_.size(); ++i) {
        if (group_of(i) == group) s |= AttrSet{1} << i;
    }
    return s;
}

std::string SyntheticWorld::render(AttrSet attrs) const {
    std::string out(kAnswerPrefix);
    for (std::size_t i = 0; i < universe_.size(); ++i) {
        if ((attrs >> i) & 1U) {
            out += ' ';
            out += universe_[i];
        }
    }
    return out;
}

std::optional<AttrSet> SyntheticWorld::parse(std::string_view text) const {
    if (!text.starts_with(kAnswerPrefix)) return std::nullopt;
    std::istringstream in{std::string(text.substr(kAnswerPrefix.size()))};
    AttrSet s = 0;
    std::string tag;
    while (in >> tag) {
        auto i = index_of(tag);
        if (!i) return std::nullopt;
        s |= AttrSet{1} << *i;
    }
    return s;
}

ReferenceAnswer SyntheticWorld::reference(const WorldQuery& q) const { return {q.id, render(target(q.id))}; }

nlohmann::json SyntheticWorld::to_json() const {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : groups_) groups.push_back({{"name", g.name}, {"attributes", g.attributes}});
    nlohmann::json dgroups = nlohmann::json::object();
    for (const auto& [name, d] : group_distractors_) {
        dgroups[name] = {{"miss_prob", d.miss_prob}, {"extra_prob", d.extra_prob}};
    }
    nlohmann::json queries = nlohmann::json::array();
    for (const auto& q : queries_) {
        queries.push_back({{"id", q.id}, {"text", q.text}, {"split", q.split}, {"target", q.target}});
    }
    return {{"name", name_},
            {"seed", seed_},
            {"groups", groups},
            {"distractors",
             {{"default", {{"miss_prob", default_distractors_.miss_prob}, {"extra_prob", default_distractors_.extra_prob}}},
              {"groups", dgroups}}},
            {"queries", queries}};
}

// Predicates -------------------------------------------------------------------

std::optional<PredicateCriterion> parse_predicate(const SyntheticWorld& world, std::string_view criterion) {
    std::string key;
    try {
        key = canonicalize(criterion).canonical;
    } catch (const Error&) {
        return std::nullopt;
    }
    Polarity polarity;
    std::string_view rest = key;
    if (rest.starts_with("has:")) {
        polarity = Polarity::has;
    } else if (rest.starts_with("not:")) {
        polarity = Polarity::lacks;
    } else {
        return std::nullopt;
    }
    rest.remove_prefix(4);
    while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
    auto idx = world.index_of(rest);
    if (!idx) return std::nullopt;
    return PredicateCriterion{polarity, *idx};
}

std::string predicate_text(const SyntheticWorld& world, PredicateCriterion p) {
    return (p.polarity == Polarity::has ? "has:" : "not:") + world.universe().at(p.attribute);
}

std::vector<PredicateCriterion> all_predicates(const SyntheticWorld& world) {
    std::vector<PredicateCriterion> out;
    out.reserve(2 * world.size());
    for (std::size_t i = 0; i < world.size(); ++i) {
        out.push_back({Polarity::has, i});
        out.push_back({Polarity::lacks, i});
    }
    return out;
}

double synth_verify(const SyntheticWorld& world, AttrSet answer, std::string_view criterion) {
    auto p = parse_predicate(world, criterion);
    if (!p) {
        spdlog::warn("synthetic verifier cannot evaluate criterion '{}'; scoring 0", criterion);
        return 0.0;
    }
    return p->holds(answer) ? 1.0 : 0.0;
}

double predicate_gap(PredicateCriterion p, AttrSet reference, std::span<const AttrSet> pool) {
    if (pool.empty()) throw Error(Errc::empty_pool, "predicate gap needs at least one candidate");
    double hits = 0.0;
    for (auto o : pool) hits += p.holds(o) ? 1.0 : 0.0;
    return (p.holds(reference) ? 1.0 : 0.0) - hits / static_cast<double>(pool.size());
}

OracleResult oracle_best_rubric(const SyntheticWorld& world, std::string_view query_id, AttrSet reference,
                                std::span<const AttrSet> pool, std::size_t k) {
    if (world.size() > kMaxEnumerableUniverse) {
        throw Error(Errc::universe_too_large,
                    fmt::format("oracle enumerates at most {} attributes, world has {}", kMaxEnumerableUniverse,
                                world.size()));
    }
    if (k == 0) throw Error(Errc::precondition, "oracle rubric size must be positive");
    struct Scored {
        PredicateCriterion p;
        double gap;
    };
    std::vector<Scored> scored;
    for (auto p : all_predicates(world)) scored.push_back({p, predicate_gap(p, reference, pool)});
    std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.gap > b.gap; });
    scored.resize(std::min(k, scored.size()));

    OracleResult out;
    std::vector<std::string> texts;
    for (const auto& s : scored) {
        texts.push_back(predicate_text(world, s.p));
        out.item_gaps.push_back(s.gap);
    }
    out.rubric = uniform_rubric(std::string(query_id), texts);
    out.gap = std::accumulate(out.item_gaps.begin(), out.item_gaps.end(), 0.0) /
              static_cast<double>(out.item_gaps.size());
    return out;
}

// Synthetic backend ------------------------------------------------------------

double SyntheticSettings::epsilon(int round) const noexcept {
    if (epsilon_by_round.empty()) return 0.0;
    const auto idx = std::min<std::size_t>(static_cast<std::size_t>(std::max(round, 0)), epsilon_by_round.size() - 1);
    return epsilon_by_round[idx];
}

SyntheticBackend::SyntheticBackend(std::shared_ptr<const SyntheticWorld> world, SyntheticSettings settings)
    : world_(std::move(world)), settings_(std::move(settings)) {
    if (!world_) throw Error(Errc::precondition, "synthetic backend needs a world");
    if (settings_.rubric_size == 0) throw Error(Errc::config, "rubric_size must be positive");
    if (settings_.verifier_noise < 0 || settings_.verifier_noise > 1) {
        throw Error(Errc::config, "verifier_noise must lie in [0, 1]");
    }
    for (double e : settings_.epsilon_by_round) {
        if (e < 0 || e > 1) throw Error(Errc::config, "epsilon values must lie in [0, 1]");
    }
}

ports::ModelPorts SyntheticBackend::ports() {
    auto self = shared_from_this();
    return {self, self, self, self, self};
}

AttrSet SyntheticBackend::parse_or_throw(std::string_view text) const {
    auto s = world_->parse(text);
    if (!s) throw Error(Errc::data, "not a synthetic attribute list: '" + std::string(text.substr(0, 80)) + "'");
    return *s;
}

Rubric SyntheticBackend::propose(const ports::ProposerRequest& req) {
    ports::check_mode(req);
    return req.mode == ProposalMode::contrastive ? propose_contrastive(req) : propose_from_memory(req);
}

Rubric SyntheticBackend::propose_contrastive(const ports::ProposerRequest& req) const {
    const AttrSet ref = parse_or_throw(req.reference->text);
    std::vector<AttrSet> pool;
    for (const auto& c : req.candidates.candidates) pool.push_back(parse_or_throw(c.text));

    SplitMix64 rng(derive_seed(req.decoding.seed, {"propose", mode_tag(req.mode), req.query.id}));
    auto preds = all_predicates(*world_);
    seeded_shuffle(preds, rng);
    std::vector<std::pair<PredicateCriterion, double>> scored;
    for (auto p : preds) scored.emplace_back(p, predicate_gap(p, ref, pool));
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<std::string> chosen;
    for (const auto& [p, gap] : scored) {
        if (chosen.size() >= settings_.rubric_size || gap <= kGapEps) break;
        chosen.push_back(predicate_text(*world_, p));
    }
    if (chosen.empty()) chosen.push_back(predicate_text(*world_, scored.front().first));
    return uniform_rubric(req.query.id, chosen);
}

Rubric SyntheticBackend::propose_from_memory(const ports::ProposerRequest& req) const {
    std::vector<AttrSet> pool;
    for (const auto& c : req.candidates.candidates) pool.push_back(parse_or_throw(c.text));

    struct Remembered {
        std::string criterion;
        double mean;
    };
    std::vector<Remembered> remembered;
    std::set<std::string> used;
    for (const auto& cat : req.memory->categories) {
        for (const auto& item : cat.items) {
            if (used.insert(item.key.canonical).second) remembered.push_back({item.criterion, item.mean_reward});
        }
    }

    SplitMix64 rng(derive_seed(req.decoding.seed, {"propose", mode_tag(req.mode), req.query.id,
                                                   std::to_string(req.round)}));
    // Greedy decoding (temperature 0) never explores.
    const double eps = req.decoding.temperature > 0.0 ? settings_.epsilon(req.round) : 0.0;

    auto unused = [&] {
        std::vector<PredicateCriterion> varying, constant;
        for (auto p : all_predicates(*world_)) {
            if (used.count(canonicalize(predicate_text(*world_, p)).canonical)) continue;
            const bool first = p.holds(pool.front());
            const bool varies =
                std::any_of(pool.begin(), pool.end(), [&](AttrSet o) { return p.holds(o) != first; });
            (varies ? varying : constant).push_back(p);
        }
        return varying.empty() ? constant : varying;
    };
    std::vector<std::string> chosen;
    auto explore = [&]() -> bool {
        auto options = unused();
        if (options.empty()) return false;
        auto text = predicate_text(*world_, options[rng.below(options.size())]);
        used.insert(canonicalize(text).canonical);
        chosen.push_back(std::move(text));
        return true;
    };
    std::vector<bool> taken(remembered.size(), false);
    auto exploit = [&]() -> bool {
        double total = 0.0;
        for (std::size_t i = 0; i < remembered.size(); ++i) {
            if (!taken[i]) total += std::max(remembered[i].mean, 0.0);
        }
        if (total <= 0.0) return false;
        if (req.decoding.temperature <= 0.0) {
            std::size_t best = remembered.size();
            for (std::size_t i = 0; i < remembered.size(); ++i) {
                if (taken[i] || remembered[i].mean <= 0.0) continue;
                if (best == remembered.size() || remembered[i].mean > remembered[best].mean) best = i;
            }
            taken[best] = true;
            chosen.push_back(remembered[best].criterion);
            return true;
        }
        double u = rng.uniform() * total;
        std::size_t pick = remembered.size();
        for (std::size_t i = 0; i < remembered.size(); ++i) {
            if (taken[i] || remembered[i].mean <= 0.0) continue;
            pick = i;
            u -= remembered[i].mean;
            if (u < 0.0) break;
        }
        taken[pick] = true;
        chosen.push_back(remembered[pick].criterion);
        return true;
    };

    for (std::size_t slot = 0; slot < settings_.rubric_size; ++slot) {
        if (rng.uniform() < eps) {
            if (!explore()) exploit();
        } else {
            exploit();
        }
    }
    if (chosen.empty() && !explore()) {
        // Everything is remembered and nothing has positive reward: fall back to the best entry.
        auto best = std::max_element(remembered.begin(), remembered.end(),
                                     [](const Remembered& a, const Remembered& b) { return a.mean < b.mean; });
        chosen.push_back(best->criterion);
    }
    return uniform_rubric(req.query.id, chosen);
}

double SyntheticBackend::verify(const ports::VerifierRequest& req) {
    const AttrSet answer = parse_or_throw(req.answer);
    const double exact = synth_verify(*world_, answer, req.criterion);
    if (req.mode == VerifierMode::binary || settings_.verifier_noise == 0.0) return exact;
    SplitMix64 rng(derive_seed(world_->seed(), {"verify", req.query.id, req.answer, canonicalize(req.criterion).canonical,
                                                std::to_string(req.sample)}));
    return (1.0 - settings_.verifier_noise) * exact + settings_.verifier_noise * rng.uniform();
}

std::string SyntheticBackend::categorize(const ports::CategorizerRequest& req) {
    std::optional<std::size_t> attribute;
    if (auto p = parse_predicate(*world_, req.criterion)) {
        attribute = p->attribute;
    } else {
        // Free text: the longest tag mentioned, with underscores read as spaces.
        std::string text;
        try {
            text = canonicalize(req.criterion).canonical;
        } catch (const Error&) {
            return ports::kFallbackCategory;
        }
        std::size_t best_len = 0;
        for (std::size_t i = 0; i < world_->size(); ++i) {
            std::string tag = world_->universe()[i];
            std::string spaced = tag;
            std::replace(spaced.begin(), spaced.end(), '_', ' ');
            if ((text.find(tag) != std::string::npos || text.find(spaced) != std::string::npos) &&
                tag.size() > best_len) {
                attribute = i;
                best_len = tag.size();
            }
        }
    }
    if (!attribute) return ports::kFallbackCategory;
    const auto& group = world_->group_of(*attribute);
    for (const auto& existing : req.existing_categories) {
        if (canonicalize(existing) == canonicalize(group)) return existing;
    }
    return group;
}

AttrSet SyntheticBackend::best_response(AttrSet reference, const Rubric& rubric, std::uint64_t seed) const {
    const std::size_t n = world_->size();
    std::vector<double> w_has(n, 0.0), w_not(n, 0.0);
    for (const auto& item : rubric.items) {
        auto p = parse_predicate(*world_, item.criterion);
        if (!p) continue;  // scores 0 on every answer, so it cannot change the argmax
        (p->polarity == Polarity::has ? w_has : w_not)[p->attribute] += item.weight;
    }
    SplitMix64 rng(seed);
    AttrSet decided = 0;
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < n; ++i) {
        if (w_has[i] > w_not[i]) {
            decided |= AttrSet{1} << i;
        } else if (w_has[i] == w_not[i]) {
            free.push_back(i);
        }
    }
    auto flip_free = [&] {
        AttrSet s = decided;
        for (auto i : free) {
            if (rng() & 1U) s |= AttrSet{1} << i;
        }
        return s;
    };
    AttrSet out = flip_free();
    if (n == 0 || out != reference) return out;
    for (int tries = 0; tries < 64 && !free.empty(); ++tries) {
        out = flip_free();
        if (out != reference) return out;
    }
    // Still equal: flip the cheapest attribute (free ones cost nothing).
    double min_loss = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> cheapest;
    for (std::size_t i = 0; i < n; ++i) {
        const double loss = std::abs(w_has[i] - w_not[i]);
        if (loss < min_loss - 1e-15) {
            min_loss = loss;
            cheapest = {i};
        } else if (std::abs(loss - min_loss) <= 1e-15) {
            cheapest.push_back(i);
        }
    }
    return out ^ (AttrSet{1} << cheapest[rng.below(cheapest.size())]);
}

CandidatePool SyntheticBackend::generate_adversarial(const ports::AdversaryRequest& req) {
    const AttrSet ref = world_->target(req.query.id);
    CandidatePool pool{req.query.id, req.round, {}};
    for (int j = 0; j < req.num_candidates; ++j) {
        const auto seed = derive_seed(req.decoding.seed, {"adversary", req.query.id, std::to_string(req.round),
                                                          std::to_string(j)});
        pool.candidates.push_back(
            {req.query.id, world_->render(best_response(ref, req.rubric, seed)), Origin::adversarial, req.round});
    }
    return pool;
}

CandidatePool SyntheticBackend::generate_answers(const ports::AnswerRequest& req) {
    const AttrSet ref = world_->target(req.query.id);
    CandidatePool pool{req.query.id, 0, {}};
    std::set<AttrSet> seen{ref};
    for (int j = 0; j < req.num_candidates; ++j) {
        AttrSet attrs = 0;
        for (int attempt = 0; attempt < 64; ++attempt) {
            SplitMix64 rng(derive_seed(req.decoding.seed ^ world_->seed(),
                                       {"answers", req.query.id, std::to_string(j), std::to_string(attempt)}));
            attrs = 0;
            for (std::size_t i = 0; i < world_->size(); ++i) {
                const auto& d = world_->distractors_for(i);
                const bool target = (ref >> i) & 1U;
                const bool present = target ? rng.uniform() >= d.miss_prob : rng.uniform() < d.extra_prob;
                if (present) attrs |= AttrSet{1} << i;
            }
            if (!seen.count(attrs)) break;
        }
        seen.insert(attrs);
        pool.candidates.push_back({req.query.id, world_->render(attrs), Origin::base, 0});
    }
    return pool;
}

SyntheticSettings settings_from_json(const nlohmann::json& j) {
    SyntheticSettings s;
    if (j.is_null()) return s;
    try {
        s.rubric_size = j.value("rubric_size", s.rubric_size);
        if (j.contains("epsilon_by_round")) s.epsilon_by_round = j.at("epsilon_by_round").get<std::vector<double>>();
        s.verifier_noise = j.value("verifier_noise", s.verifier_noise);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, std::string("synthetic settings: ") + e.what());
    }
    return s;
}

// Fault injection --------------------------------------------------------------

struct FaultInjector::Shared {
    ports::ModelPorts inner;
    FaultPlan plan;
    std::atomic<std::size_t> attempts{0};
    std::atomic<std::size_t> injected{0};
    std::mutex mutex;
    std::unordered_map<std::string, std::uint64_t> seen;

    enum class Fault { none, timeout, malformed, out_of_range };

    /// Counts the attempt and decides its fate from (request digest, attempt number).
    std::pair<Fault, std::uint64_t> decide(std::string_view role, const std::string& request, bool poisoned,
                                           bool allow_out_of_range) {
        ++attempts;
        std::uint64_t n;
        {
            std::lock_guard lock(mutex);
            n = seen[std::string(role) + request]++;
        }
        SplitMix64 rng(derive_seed(plan.seed, {"fault", role, request, std::to_string(n)}));
        const double u = rng.uniform();
        const std::uint64_t bits = rng();
        Fault f = Fault::none;
        if (poisoned) {
            f = Fault::malformed;
        } else if (u < plan.timeout_rate) {
            f = Fault::timeout;
        } else if (u < plan.timeout_rate + plan.malformed_rate) {
            f = Fault::malformed;
        } else if (allow_out_of_range && u < plan.timeout_rate + plan.malformed_rate + plan.out_of_range_rate) {
            f = Fault::out_of_range;
        }
        if (f != Fault::none) ++injected;
        return {f, bits};
    }

    static void raise(Fault f, std::string_view role) {
        if (f == Fault::timeout) throw Error(Errc::backend_unavailable, fmt::format("injected timeout ({})", role));
        if (f == Fault::malformed) throw Error(Errc::malformed_response, fmt::format("injected garbage ({})", role));
    }
};

namespace {

using Fault = FaultInjector::Shared::Fault;

class FaultyProposer final : public ports::RubricProposer {
  public:
    explicit FaultyProposer(std::shared_ptr<FaultInjector::Shared> s) : s_(std::move(s)) {}
    Rubric propose(const ports::ProposerRequest& req) override {
        const auto request = digest_parts({req.query.id, to_string(req.mode), std::to_string(req.round),
                                           std::to_string(req.decoding.seed)});
        auto [fault, bits] = s_->decide("proposer", request, s_->plan.poisoned_queries.count(req.query.id) > 0, false);
        FaultInjector::Shared::raise(fault, "proposer");
        return s_->inner.proposer->propose(req);
    }

  private:
    std::shared_ptr<FaultInjector::Shared> s_;
};

class FaultyVerifier final : public ports::Verifier {
  public:
    explicit FaultyVerifier(std::shared_ptr<FaultInjector::Shared> s) : s_(std::move(s)) {}
    double verify(const ports::VerifierRequest& req) override {
        const auto request = digest_parts({req.query.id, req.answer, req.criterion, to_string(req.mode),
                                           std::to_string(req.sample)});
        auto [fault, bits] = s_->decide("verifier", request, false, true);
        FaultInjector::Shared::raise(fault, "verifier");
        const double score = s_->inner.verifier->verify(req);
        if (fault != Fault::out_of_range) return score;
        // Half the hits stay within the clamp slack, half are far out.
        const double excess = (bits & 1U) ? 0.03 : 0.7;
        return score >= 0.5 ? 1.0 + excess : -excess;
    }

  private:
    std::shared_ptr<FaultInjector::Shared> s_;
};

class FaultyCategorizer final : public ports::Categorizer {
  public:
    explicit FaultyCategorizer(std::shared_ptr<FaultInjector::Shared> s) : s_(std::move(s)) {}
    std::string categorize(const ports::CategorizerRequest& req) override {
        std::string request = req.criterion;
        for (const auto& c : req.existing_categories) request += "\x1f" + c;
        auto [fault, bits] = s_->decide("categorizer", digest(request), false, false);
        FaultInjector::Shared::raise(fault, "categorizer");
        return s_->inner.categorizer->categorize(req);
    }

  private:
    std::shared_ptr<FaultInjector::Shared> s_;
};

class FaultyAdversary final : public ports::Adversary {
  public:
    explicit FaultyAdversary(std::shared_ptr<FaultInjector::Shared> s) : s_(std::move(s)) {}
    CandidatePool generate_adversarial(const ports::AdversaryRequest& req) override {
        const auto request =
            digest_parts({req.query.id, std::to_string(req.round), std::to_string(req.decoding.seed)});
        auto [fault, bits] = s_->decide("adversary", request, false, false);
        FaultInjector::Shared::raise(fault, "adversary");
        return s_->inner.adversary->generate_adversarial(req);
    }

  private:
    std::shared_ptr<FaultInjector::Shared> s_;
};

class FaultyAnswers final : public ports::AnswerModel {
  public:
    explicit FaultyAnswers(std::shared_ptr<FaultInjector::Shared> s) : s_(std::move(s)) {}
    CandidatePool generate_answers(const ports::AnswerRequest& req) override {
        const auto request = digest_parts({req.query.id, std::to_string(req.decoding.seed)});
        auto [fault, bits] = s_->decide("answers", request, false, false);
        FaultInjector::Shared::raise(fault, "answers");
        return s_->inner.answers->generate_answers(req);
    }

  private:
    std::shared_ptr<FaultInjector::Shared> s_;
};

}  // namespace

FaultInjector::FaultInjector(ports::ModelPorts inner, FaultPlan plan) : shared_(std::make_shared<Shared>()) {
    const double total = plan.timeout_rate + plan.malformed_rate + plan.out_of_range_rate;
    if (plan.timeout_rate < 0 || plan.malformed_rate < 0 || plan.out_of_range_rate < 0 || total > 1.0) {
        throw Error(Errc::config, "fault rates must be non-negative and sum to at most 1");
    }
    shared_->inner = std::move(inner);
    shared_->plan = std::move(plan);
}

ports::ModelPorts FaultInjector::ports() const {
    ports::ModelPorts out;
    const auto& in = shared_->inner;
    if (in.proposer) out.proposer = std::make_shared<FaultyProposer>(shared_);
    if (in.verifier) out.verifier = std::make_shared<FaultyVerifier>(shared_);
    if (in.categorizer) out.categorizer = std::make_shared<FaultyCategorizer>(shared_);
    if (in.adversary) out.adversary = std::make_shared<FaultyAdversary>(shared_);
    if (in.answers) out.answers = std::make_shared<FaultyAnswers>(shared_);
    return out;
}

std::size_t FaultInjector::attempts() const noexcept { return shared_->attempts.load(); }
std::size_t FaultInjector::injected() const noexcept { return shared_->injected.load(); }

FaultPlan fault_plan_from_json(const nlohmann::json& j) {
    FaultPlan p;
    try {
        p.timeout_rate = j.value("timeout_rate", 0.0);
        p.malformed_rate = j.value("malformed_rate", 0.0);
        p.out_of_range_rate = j.value("out_of_range_rate", 0.0);
        if (j.contains("poisoned_queries")) {
            for (const auto& q : j.at("poisoned_queries")) p.poisoned_queries.insert(q.get<std::string>());
        }
        p.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, std::string("fault_injection: ") + e.what());
    }
    return p;
}

}  // namespace rubricmem::testbed
