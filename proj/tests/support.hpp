#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rubricmem/ports.hpp"
#include "rubricmem/testbed.hpp"

namespace support {

inline std::filesystem::path source_dir() { return RUBRICMEM_SOURCE_DIR; }

inline std::filesystem::path fresh_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("rubricmem_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Verifier answering from a table keyed by (answer, criterion). Repetition
/// `sample` picks scores[sample % size]. Unknown pairs score 0.
class TableVerifier : public rubricmem::ports::Verifier {
  public:
    void set(const std::string& answer, const std::string& criterion, std::vector<double> scores) {
        table_[{answer, criterion}] = std::move(scores);
    }

    double verify(const rubricmem::ports::VerifierRequest& req) override {
        std::lock_guard lock(mutex_);
        ++calls;
        auto it = table_.find({req.answer, req.criterion});
        if (it == table_.end()) return 0.0;
        return it->second[req.sample % it->second.size()];
    }

    int calls = 0;

  private:
    std::mutex mutex_;
    std::map<std::pair<std::string, std::string>, std::vector<double>> table_;
};

/// Small two-group world used across tests: universe a b c d.
inline nlohmann::json tiny_world_json() {
    return nlohmann::json::parse(R"({
      "name": "tiny",
      "seed": 3,
      "groups": [
        {"name": "style", "attributes": ["a", "b"]},
        {"name": "substance", "attributes": ["c", "d"]}
      ],
      "distractors": {"default": {"miss_prob": 0.5, "extra_prob": 0.3}},
      "queries": [
        {"id": "q1", "text": "first", "split": "tuning", "target": ["a", "c"]},
        {"id": "q2", "text": "second", "split": "tuning", "target": ["b", "c"]},
        {"id": "q3", "text": "third", "split": "validation", "target": ["a", "d"]},
        {"id": "q4", "text": "fourth", "split": "evaluation", "target": ["b", "d"]}
      ]
    })");
}

inline std::shared_ptr<const rubricmem::testbed::SyntheticWorld> tiny_world() {
    return std::make_shared<const rubricmem::testbed::SyntheticWorld>(
        rubricmem::testbed::SyntheticWorld::from_json(tiny_world_json()));
}

inline std::shared_ptr<const rubricmem::testbed::SyntheticWorld> bundled_world(const std::string& name) {
    return std::make_shared<const rubricmem::testbed::SyntheticWorld>(
        rubricmem::testbed::SyntheticWorld::load((source_dir() / "worlds" / (name + ".json")).string()));
}

/// Writes the tiny world plus a small binary-verifier run config into `dir`.
inline std::filesystem::path tiny_run_config(const std::filesystem::path& dir, int rounds = 2,
                                             std::int64_t max_inner = 6) {
    {
        std::ofstream(dir / "world.json") << tiny_world_json().dump(2);
    }
    nlohmann::json cfg = {
        {"output", "run"},
        {"synthetic_world", "world.json"},
        {"synthetic", {{"rubric_size", 3}, {"epsilon_by_round", {0.0, 0.1}}}},
        {"tuning",
         {{"examples", 2}, {"candidates", 3}, {"verifier_mode", "binary"}, {"repetitions", 1},
          {"max_inner_iterations", max_inner}, {"max_outer_rounds", rounds}, {"seed", 11}}},
        {"retry", {{"max_retries", 1}, {"initial_backoff_ms", 0}}},
    };
    const auto path = dir / "config.json";
    std::ofstream(path) << cfg.dump(2);
    return path;
}

}  // namespace support
