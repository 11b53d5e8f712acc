#include "rubricmem/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rubricmem/errors.hpp"

namespace rubricmem::memory {

double history_mean(const std::vector<RewardSample>& history) noexcept {
    if (history.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& s : history) sum += s.alpha;
    return sum / static_cast<double>(history.size());
}

std::vector<std::string> MemoryBank::category_names() const {
    std::vector<std::string> names;
    names.reserve(categories_.size());
    for (const auto& c : categories_) names.push_back(c.name);
    return names;
}

std::size_t MemoryBank::entry_count() const noexcept { return housing_.size(); }

std::optional<std::string> MemoryBank::category_of(const CriterionKey& key) const {
    if (auto it = housing_.find(key); it != housing_.end()) return it->second;
    return std::nullopt;
}

const Category* MemoryBank::category(std::string_view name) const {
    for (const auto& c : categories_) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

const MemoryEntry* MemoryBank::find(const CriterionKey& key) const {
    const auto home = category_of(key);
    if (!home) return nullptr;
    const auto* cat = category(*home);
    return &cat->entries.at(key);
}

void MemoryBank::advance(Stamp to) {
    if (to < clock_) {
        throw Error(Errc::precondition, fmt::format("memory clock cannot move back from ({},{}) to ({},{})",
                                                    clock_.round, clock_.iteration, to.round, to.iteration));
    }
    clock_ = to;
}

Category& MemoryBank::category_for_insert(const std::string& name) {
    for (auto& c : categories_) {
        if (c.name == name) return c;
    }
    return categories_.emplace_back(Category{name, {}});
}

UpdateOutcome MemoryBank::update(const std::string& category, std::string_view criterion, double alpha,
                                 const std::string& evidence_query) {
    if (category.empty()) throw Error(Errc::precondition, "category name is empty");
    if (!std::isfinite(alpha)) throw Error(Errc::precondition, "item reward must be finite");
    if (evidence_query.empty()) throw Error(Errc::precondition, "evidence query id is empty");
    auto key = canonicalize(criterion);

    UpdateOutcome outcome = UpdateOutcome::merged;
    std::string home = category;
    if (auto existing = category_of(key)) {
        if (*existing != category) {
            spdlog::warn("criterion '{}' is housed under '{}', not '{}'; merging into '{}'", key.canonical,
                         *existing, category, *existing);
            outcome = UpdateOutcome::merged_into_existing_category;
            home = *existing;
        }
    } else {
        outcome = UpdateOutcome::created;
    }

    Category& cat = category_for_insert(home);
    auto [it, inserted] = cat.entries.try_emplace(key);
    MemoryEntry& entry = it->second;
    if (inserted) {
        entry.criterion = std::string(criterion);
        entry.key = key;
        entry.created_at = clock_;
        housing_.emplace(key, home);
    }
    entry.reward_history.push_back({alpha, clock_});
    entry.mean_reward = history_mean(entry.reward_history);
    if (std::find(entry.evidence.begin(), entry.evidence.end(), evidence_query) == entry.evidence.end()) {
        entry.evidence.push_back(evidence_query);
    }
    ++version_;
    return outcome;
}

std::string assign_category(const MemoryBank& bank, std::string_view criterion, ports::Categorizer& categorizer) {
    if (auto home = bank.category_of(canonicalize(criterion))) return *home;
    return categorizer.categorize({bank.category_names(), std::string(criterion)});
}

// Retrieval --------------------------------------------------------------------

std::size_t retained_count(std::size_t m, double fraction) noexcept {
    if (m == 0) return 0;
    // The small epsilon keeps fractions like 0.3 * 10 from rounding up to 4.
    const double raw = std::ceil(fraction * static_cast<double>(m) - 1e-9);
    const auto k = raw <= 1.0 ? std::size_t{1} : static_cast<std::size_t>(raw);
    return std::min(k, m);
}

RetrievedMemory retrieve(const MemoryBank& bank, RetrievalOptions options) {
    RetrievedMemory out;
    out.bank_version = bank.version();
    for (const auto& cat : bank.categories()) {
        if (cat.entries.empty()) continue;
        std::vector<const MemoryEntry*> ranked;
        ranked.reserve(cat.entries.size());
        for (const auto& [key, entry] : cat.entries) ranked.push_back(&entry);
        std::sort(ranked.begin(), ranked.end(), [](const MemoryEntry* a, const MemoryEntry* b) {
            if (a->mean_reward != b->mean_reward) return a->mean_reward > b->mean_reward;
            if (a->created_at != b->created_at) return a->created_at < b->created_at;
            return a->key < b->key;
        });
        ranked.resize(retained_count(ranked.size(), options.fraction));

        CategorySelection sel{cat.name, {}};
        for (const auto* e : ranked) {
            sel.items.push_back({e->criterion, e->key, e->mean_reward, e->reward_history.size(), e->evidence});
        }
        out.categories.push_back(std::move(sel));
    }
    out.rendered = render(out.categories, options.evidence_cap);
    return out;
}

std::string render(const std::vector<CategorySelection>& selections, std::size_t evidence_cap) {
    std::string out;
    for (const auto& sel : selections) {
        out += fmt::format("## {}\n", sel.category);
        for (const auto& item : sel.items) {
            out += fmt::format("- [{:+.3f}] {}", item.mean_reward, item.criterion);
            if (!item.evidence.empty() && evidence_cap > 0) {
                const auto n = std::min(evidence_cap, item.evidence.size());
                std::string ev;
                for (auto it = item.evidence.end() - static_cast<std::ptrdiff_t>(n); it != item.evidence.end(); ++it) {
                    if (!ev.empty()) ev += ", ";
                    ev += *it;
                }
                out += fmt::format(" (evidence: {})", ev);
            }
            out += '\n';
        }
    }
    return out;
}

// Snapshots --------------------------------------------------------------------

void to_json(nlohmann::json& j, const Stamp& v) { j = {{"round", v.round}, {"iteration", v.iteration}}; }

void from_json(const nlohmann::json& j, Stamp& v) {
    v.round = j.at("round").get<int>();
    v.iteration = j.at("iteration").get<std::int64_t>();
}

void to_json(nlohmann::json& j, const MemoryEntry& v) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& s : v.reward_history) history.push_back({{"alpha", s.alpha}, {"at", s.at}});
    j = {{"criterion", v.criterion},     {"key", v.key},           {"reward_history", history},
         {"mean_reward", v.mean_reward}, {"evidence", v.evidence}, {"created_at", v.created_at}};
}

void from_json(const nlohmann::json& j, MemoryEntry& v) {
    v.criterion = j.at("criterion").get<std::string>();
    v.key = j.at("key").get<CriterionKey>();
    v.reward_history.clear();
    for (const auto& s : j.at("reward_history")) {
        v.reward_history.push_back({s.at("alpha").get<double>(), s.at("at").get<Stamp>()});
    }
    v.mean_reward = j.at("mean_reward").get<double>();
    v.evidence = j.at("evidence").get<std::vector<std::string>>();
    v.created_at = j.at("created_at").get<Stamp>();
}

void to_json(nlohmann::json& j, const MemoryBank& bank) {
    nlohmann::json cats = nlohmann::json::array();
    for (const auto& c : bank.categories_) {
        nlohmann::json entries = nlohmann::json::array();
        for (const auto& [key, e] : c.entries) entries.push_back(e);
        cats.push_back({{"name", c.name}, {"entries", entries}});
    }
    j = {{"schema", kSnapshotSchemaId},
         {"schema_version", kSnapshotSchemaVersion},
         {"version", bank.version_},
         {"clock", bank.clock_},
         {"categories", cats}};
}

void from_json(const nlohmann::json& j, MemoryBank& bank) {
    MemoryBank out;
    out.version_ = j.at("version").get<std::uint64_t>();
    out.clock_ = j.at("clock").get<Stamp>();
    for (const auto& c : j.at("categories")) {
        Category cat{c.at("name").get<std::string>(), {}};
        for (const auto& e : c.at("entries")) {
            auto entry = e.get<MemoryEntry>();
            if (entry.key != canonicalize(entry.criterion)) {
                throw Error(Errc::corrupt_snapshot, "entry key does not match its criterion");
            }
            if (!out.housing_.emplace(entry.key, cat.name).second) {
                throw Error(Errc::corrupt_snapshot, "criterion '" + entry.key.canonical + "' housed twice");
            }
            cat.entries.emplace(entry.key, std::move(entry));
        }
        out.categories_.push_back(std::move(cat));
    }
    bank = std::move(out);
}

std::string snapshot_string(const MemoryBank& bank) {
    nlohmann::json j = bank;
    return j.dump(2) + "\n";
}

void snapshot(const MemoryBank& bank, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw Error(Errc::io, "cannot write snapshot " + path);
        out << snapshot_string(bank);
        if (!out) throw Error(Errc::io, "short write to snapshot " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error(Errc::io, "cannot rename snapshot to " + path);
}

MemoryBank load_string(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::corrupt_snapshot, e.what());
    }
    if (!j.is_object() || j.value("schema", "") != kSnapshotSchemaId) {
        throw Error(Errc::corrupt_snapshot, "not a memory bank snapshot");
    }
    const auto version = j.value("schema_version", -1);
    if (version != kSnapshotSchemaVersion) {
        throw Error(Errc::version_mismatch, fmt::format("snapshot schema version {} (supported: {})", version,
                                                        kSnapshotSchemaVersion));
    }
    try {
        return j.get<MemoryBank>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::corrupt_snapshot, e.what());
    } catch (const Error& e) {
        if (e.code() == Errc::corrupt_snapshot) throw;
        throw Error(Errc::corrupt_snapshot, e.what());
    }
}

MemoryBank load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::corrupt_snapshot, "cannot read snapshot " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return load_string(buf.str());
}

std::vector<std::string> check_integrity(const MemoryBank& bank) {
    std::vector<std::string> problems;
    std::set<CriterionKey> seen;
    for (const auto& cat : bank.categories()) {
        for (const auto& [key, e] : cat.entries) {
            if (!seen.insert(key).second) problems.push_back("key housed twice: " + key.canonical);
            if (e.key != key) problems.push_back("entry key mismatch: " + key.canonical);
            if (e.mean_reward != history_mean(e.reward_history)) {
                problems.push_back("mean_reward drifted from history: " + key.canonical);
            }
            if (e.reward_history.empty() || e.evidence.empty()) {
                problems.push_back("entry without history or evidence: " + key.canonical);
            }
            std::set<std::string> ev(e.evidence.begin(), e.evidence.end());
            if (ev.size() != e.evidence.size()) problems.push_back("duplicate evidence: " + key.canonical);
            if (bank.category_of(key) != cat.name) problems.push_back("housing index stale: " + key.canonical);
        }
    }
    if (seen.size() != bank.entry_count()) problems.push_back("housing index size mismatch");
    return problems;
}

}  // namespace rubricmem::memory
