#pragma once

// Run configuration files and backend wiring shared by the CLI commands.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricmem/errors.hpp"
#include "rubricmem/loop.hpp"
#include "rubricmem/ports.hpp"
#include "rubricmem/testbed.hpp"

namespace rubricmem::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string> kRoles{"proposer", "verifier", "categorizer", "adversary", "answers"};

struct BackendConfig {
    std::string type = "synthetic";  // synthetic | remote
    nlohmann::json params = nlohmann::json::object();
    std::optional<ports::RetryPolicy> retry;
};

/// A parsed config file. Relative paths are resolved against the file's
/// directory; every referenced input must exist.
struct RunConfigFile {
    fs::path source;
    fs::path output;
    std::optional<fs::path> queries;
    std::optional<fs::path> references;
    std::optional<fs::path> pools;
    std::optional<fs::path> synthetic_world;
    testbed::SyntheticSettings synthetic;
    loop::TuningConfig tuning;
    std::map<std::string, BackendConfig> backends;
    ports::RetryPolicy retry;
    std::optional<testbed::FaultPlan> faults;

    static RunConfigFile load(const fs::path& path);
    static RunConfigFile from_json(const nlohmann::json& j, const fs::path& base_dir);

    /// Snapshot written into run directories (absolute paths, no secrets).
    [[nodiscard]] nlohmann::json to_json() const;
};

ports::RetryPolicy retry_from_json(const nlohmann::json& j, ports::RetryPolicy base = {});

struct Runtime {
    std::shared_ptr<const testbed::SyntheticWorld> world;
    ports::ModelPorts raw;
    ports::ModelPorts guarded;
    std::shared_ptr<ports::AuditLog> audit;
    std::shared_ptr<testbed::FaultInjector> injector;
};

/// Builds raw ports per role, wraps them in the fault injector when
/// configured, then guards them. An empty audit path only counts calls.
Runtime build_runtime(const RunConfigFile& config, const std::string& audit_path = {});

struct DatasetFiles {
    std::vector<Query> queries;
    std::vector<ReferenceAnswer> references;
    std::optional<loop::PoolMap> pools;
};

/// Dataset from the configured files, or derived from the synthetic world
/// when no query file is given.
DatasetFiles load_dataset(const RunConfigFile& config, const Runtime& runtime);

/// Reads one JSON value per non-empty line. Throws Errc::data naming the
/// offending line.
template <typename T>
std::vector<T> read_jsonl(const fs::path& path);

std::vector<nlohmann::json> read_jsonl_raw(const fs::path& path);

template <typename T>
std::vector<T> read_jsonl(const fs::path& path) {
    std::vector<T> out;
    std::size_t line = 0;
    for (const auto& j : read_jsonl_raw(path)) {
        ++line;
        try {
            out.push_back(j.template get<T>());
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::data, path.string() + " record " + std::to_string(line) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace rubricmem::cli
