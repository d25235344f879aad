#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace ltwin {

inline constexpr const char * kToolVersion = "ltwin 0.1.0";

// Reproducibility record written next to every command's outputs.
struct RunManifest {
    std::string command;
    nlohmann::ordered_json parameters; // full merged parameter map
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    nlohmann::ordered_json seeds;
    std::string tool_version = kToolVersion;
    double wall_time_s = 0.0;
};

void write_manifest(const RunManifest & m, const std::string & path);

// Aggregates a twin run directory into one summary JSON. Expected files:
//   {ar|mdlm}.similarity.csv
//   {ar|mdlm}.spectral.json
//   {ar|mdlm}.eval.{setting}.json   (settings such as base/eis/dis/uniform)
// Directional gaps are recomputed from those artifacts.
nlohmann::ordered_json report_bundle(const std::string & run_dir, int early_layers = 4, int late_layers = 4);

} // namespace ltwin
