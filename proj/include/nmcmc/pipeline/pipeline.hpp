#pragma once

// End-to-end run: generate -> train-vae -> encode-dataset -> train-cnf ->
// sample -> diagnose, every stage writing its artifacts under the output
// directory and skipping itself when a stamp of identical inputs is present.

#include <iosfwd>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmcmc/pipeline/config.hpp"

namespace nmcmc::pipeline {

enum class Stage { generate, train_vae, encode_dataset, train_cnf, sample, diagnose };

inline constexpr Stage kAllStages[] = {Stage::generate,  Stage::train_vae, Stage::encode_dataset,
                                       Stage::train_cnf, Stage::sample,    Stage::diagnose};

/// "generate", "train-vae", "encode-dataset", "train-cnf", "sample", "diagnose".
std::string_view to_string(Stage s);

struct StageRecord {
  Stage stage;
  bool cached = false;
  double seconds = 0.0;
};

struct PipelineResult {
  std::vector<StageRecord> stages;
  /// Contents of summary.json; null unless the diagnose stage was reached.
  nlohmann::json summary;
};

/// Runs every stage up to and including `until`. Each stage line ("<stage>
/// cached" or "<stage> done in <s> s") goes to `log` when given and to
/// stages.log in the output directory. A failing stage rethrows its error
/// with the stage name prefixed, keeping the error type.
PipelineResult run_pipeline(RunConfig cfg, Stage until = Stage::diagnose, std::ostream* log = nullptr);

}  // namespace nmcmc::pipeline
