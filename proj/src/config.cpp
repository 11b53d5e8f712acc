#include "rubricmem/config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "rubricmem/remote.hpp"

namespace rubricmem::cli {

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return fs::weakly_canonical(path.is_absolute() ? path : base / path);
}

fs::path existing(const fs::path& base, const nlohmann::json& j, const char* field) {
    const auto p = resolve(base, j.at(field).get<std::string>());
    if (!fs::exists(p)) throw Error(Errc::config, fmt::format("{} path does not exist: {}", field, p.string()));
    return p;
}

}  // namespace

ports::RetryPolicy retry_from_json(const nlohmann::json& j, ports::RetryPolicy base) {
    base.max_retries = j.value("max_retries", base.max_retries);
    base.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", base.initial_backoff.count()));
    base.multiplier = j.value("multiplier", base.multiplier);
    base.max_backoff = std::chrono::milliseconds(j.value("max_backoff_ms", base.max_backoff.count()));
    base.jitter = j.value("jitter", base.jitter);
    if (base.max_retries < 0 || base.multiplier < 1.0 || base.jitter < 0.0 || base.jitter > 1.0 ||
        base.initial_backoff.count() < 0) {
        throw Error(Errc::config, "invalid retry policy");
    }
    return base;
}

RunConfigFile RunConfigFile::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::config, "cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, path.string() + ": " + e.what());
    }
    auto cfg = from_json(j, fs::absolute(path).parent_path());
    cfg.source = fs::absolute(path);
    return cfg;
}

RunConfigFile RunConfigFile::from_json(const nlohmann::json& j, const fs::path& base) {
    RunConfigFile cfg;
    try {
        if (!j.is_object()) throw Error(Errc::config, "config must be a JSON object");
        cfg.output = resolve(base, j.value("output", std::string("run")));
        if (j.contains("synthetic_world")) cfg.synthetic_world = existing(base, j, "synthetic_world");
        if (j.contains("synthetic")) cfg.synthetic = testbed::settings_from_json(j.at("synthetic"));
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            if (d.contains("queries")) cfg.queries = existing(base, d, "queries");
            if (d.contains("references")) cfg.references = existing(base, d, "references");
            if (d.contains("pools")) cfg.pools = existing(base, d, "pools");
            if (cfg.queries.has_value() != cfg.references.has_value()) {
                throw Error(Errc::config, "dataset needs both queries and references");
            }
        }
        if (j.contains("tuning")) cfg.tuning = j.at("tuning").get<loop::TuningConfig>();
        cfg.tuning.validate();
        if (j.contains("retry")) cfg.retry = retry_from_json(j.at("retry"));
        if (j.contains("fault_injection")) cfg.faults = testbed::fault_plan_from_json(j.at("fault_injection"));

        const auto backends = j.value("backends", nlohmann::json::object());
        for (const auto& [role, b] : backends.items()) {
            if (std::find(kRoles.begin(), kRoles.end(), role) == kRoles.end()) {
                throw Error(Errc::config, "unknown backend role '" + role + "'");
            }
        }
        for (const auto& role : kRoles) {
            BackendConfig b;
            if (backends.contains(role)) {
                const auto& bj = backends.at(role);
                b.type = bj.value("type", std::string("synthetic"));
                b.params = bj;
                if (bj.contains("retry")) b.retry = retry_from_json(bj.at("retry"), cfg.retry);
            }
            if (b.type == "remote") {
                for (const char* field : {"endpoint", "model"}) {
                    if (!b.params.contains(field)) {
                        throw Error(Errc::config, fmt::format("remote {} backend needs '{}'", role, field));
                    }
                }
                b.params["prompts"] = existing(base, b.params, "prompts").string();
            } else if (b.type != "synthetic") {
                throw Error(Errc::config, "unknown backend type '" + b.type + "' for " + role);
            }
            if (b.type == "synthetic" && !cfg.synthetic_world) {
                throw Error(Errc::config, "role " + role + " is synthetic but no synthetic_world is configured");
            }
            cfg.backends[role] = std::move(b);
        }
        if (!cfg.queries && !cfg.synthetic_world) {
            throw Error(Errc::config, "config needs dataset.queries/references or a synthetic_world");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::config, std::string("config: ") + e.what());
    }
    return cfg;
}

nlohmann::json RunConfigFile::to_json() const {
    nlohmann::json j;
    j["output"] = output.string();
    if (synthetic_world) j["synthetic_world"] = synthetic_world->string();
    j["synthetic"] = {{"rubric_size", synthetic.rubric_size},
                      {"epsilon_by_round", synthetic.epsilon_by_round},
                      {"verifier_noise", synthetic.verifier_noise}};
    nlohmann::json dataset = nlohmann::json::object();
    if (queries) dataset["queries"] = queries->string();
    if (references) dataset["references"] = references->string();
    if (pools) dataset["pools"] = pools->string();
    j["dataset"] = dataset;
    j["tuning"] = tuning;
    j["retry"] = {{"max_retries", retry.max_retries},
                  {"initial_backoff_ms", retry.initial_backoff.count()},
                  {"multiplier", retry.multiplier},
                  {"max_backoff_ms", retry.max_backoff.count()},
                  {"jitter", retry.jitter}};
    nlohmann::json backends = nlohmann::json::object();
    for (const auto& [role, b] : this->backends) {
        // params only ever name the key's environment variable, never the key.
        nlohmann::json bj = b.params;
        bj["type"] = b.type;
        backends[role] = bj;
    }
    j["backends"] = backends;
    if (faults) {
        j["fault_injection"] = {{"timeout_rate", faults->timeout_rate},
                                {"malformed_rate", faults->malformed_rate},
                                {"out_of_range_rate", faults->out_of_range_rate},
                                {"poisoned_queries", faults->poisoned_queries},
                                {"seed", faults->seed}};
    }
    return j;
}

Runtime build_runtime(const RunConfigFile& config, const std::string& audit_path) {
    Runtime rt;
    std::shared_ptr<testbed::SyntheticBackend> synthetic;
    if (config.synthetic_world) {
        rt.world = std::make_shared<testbed::SyntheticWorld>(testbed::SyntheticWorld::load(config.synthetic_world->string()));
    }
    auto synthetic_backend = [&] {
        if (!synthetic) synthetic = testbed::SyntheticBackend::create(rt.world, config.synthetic);
        return synthetic;
    };
    auto remote_backend = [&](const BackendConfig& b) {
        remote::HttpOptions http;
        http.endpoint = b.params.at("endpoint").get<std::string>();
        http.model = b.params.at("model").get<std::string>();
        http.api_key_env = b.params.value("api_key_env", std::string());
        http.timeout = std::chrono::seconds(b.params.value("timeout_s", 60));
        http.max_concurrency = b.params.value("max_concurrency", std::size_t{4});
        auto transport = std::make_shared<remote::HttpChatTransport>(http);
        return std::make_shared<remote::RemoteBackend>(transport,
                                                       remote::PromptSet::load(b.params.at("prompts").get<std::string>()));
    };

    for (const auto& role : kRoles) {
        const auto& b = config.backends.at(role);
        if (b.type == "synthetic") {
            auto s = synthetic_backend();
            if (role == "proposer") rt.raw.proposer = s;
            if (role == "verifier") rt.raw.verifier = s;
            if (role == "categorizer") rt.raw.categorizer = s;
            if (role == "adversary") rt.raw.adversary = s;
            if (role == "answers") rt.raw.answers = s;
        } else {
            auto r = remote_backend(b);
            if (role == "proposer") rt.raw.proposer = r;
            if (role == "verifier") rt.raw.verifier = r;
            if (role == "categorizer") rt.raw.categorizer = r;
            if (role == "adversary") rt.raw.adversary = r;
            if (role == "answers") rt.raw.answers = r;
        }
    }
    if (config.faults) {
        rt.injector = std::make_shared<testbed::FaultInjector>(rt.raw, *config.faults);
        rt.raw = rt.injector->ports();
    }

    rt.audit = audit_path.empty() ? std::make_shared<ports::AuditLog>() : std::make_shared<ports::AuditLog>(audit_path);
    auto options_for = [&](const std::string& role) {
        const auto& b = config.backends.at(role);
        return ports::GuardOptions{b.retry.value_or(config.retry), config.tuning.max_rubric_items};
    };
    ports::RoleGuardOptions opts{options_for("proposer"), options_for("verifier"), options_for("categorizer"),
                                 options_for("adversary"), options_for("answers")};
    rt.guarded = ports::guard(rt.raw, rt.audit, opts);
    return rt;
}

std::vector<nlohmann::json> read_jsonl_raw(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot read " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(Errc::data, fmt::format("{}:{}: not valid JSON", path.string(), n));
        out.push_back(std::move(j));
    }
    return out;
}

DatasetFiles load_dataset(const RunConfigFile& config, const Runtime& runtime) {
    DatasetFiles d;
    if (config.queries) {
        d.queries = read_jsonl<Query>(*config.queries);
        d.references = read_jsonl<ReferenceAnswer>(*config.references);
    } else {
        for (const auto& q : runtime.world->queries()) {
            d.queries.push_back(runtime.world->as_query(q));
            d.references.push_back(runtime.world->reference(q));
        }
    }
    if (config.pools) {
        loop::PoolMap pools;
        for (auto& p : read_jsonl<CandidatePool>(*config.pools)) pools[p.query_id] = std::move(p);
        d.pools = std::move(pools);
    }
    return d;
}

}  // namespace rubricmem::cli
