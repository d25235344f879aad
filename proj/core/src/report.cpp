#include "ltwin/report.hpp"

#include <filesystem>
#include <fstream>

#include "ltwin/checkpoint.hpp"
#include "ltwin/probes.hpp"
#include "ltwin/spectral.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace ltwin {

void write_manifest(const RunManifest & m, const std::string & path) {
    ordered_json j;
    j["command"] = m.command;
    j["parameters"] = m.parameters;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    j["seeds"] = m.seeds;
    j["tool_version"] = m.tool_version;
    j["wall_time_s"] = m.wall_time_s;
    const std::string text = j.dump(2) + "\n";
    write_file_atomic(path, text.data(), text.size());
}

namespace {

ordered_json load_json(const std::string & path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception & e) {
        fail(ErrorKind::io, path + ": malformed JSON: " + e.what());
    }
    return j;
}

std::vector<int> block_range(int lo, int hi) {
    std::vector<int> v;
    for (int i = lo; i <= hi; ++i) v.push_back(i);
    return v;
}

} // namespace

ordered_json report_bundle(const std::string & run_dir, int early_layers, int late_layers) {
    const char * twins[2] = {"ar", "mdlm"};

    std::vector<std::string> missing;
    for (const char * twin : twins) {
        for (const std::string suffix : {".similarity.csv", ".spectral.json"}) {
            const std::string path = (fs::path(run_dir) / (twin + suffix)).string();
            if (!fs::exists(path)) missing.push_back(path);
        }
    }
    if (!missing.empty()) {
        std::string msg = "report_bundle: missing inputs:";
        for (const auto & m : missing) msg += " " + m;
        fail(ErrorKind::io, msg);
    }

    ordered_json out;
    out["run_dir"] = run_dir;
    double early_sim[2] = {0, 0};

    for (int ti = 0; ti < 2; ++ti) {
        const char * twin = twins[ti];
        ordered_json tj;

        const SimilarityMatrix sim =
            read_similarity_csv((fs::path(run_dir) / (std::string(twin) + ".similarity.csv")).string());
        const int T = sim.n_layers;
        const int ne = std::min(early_layers, T);
        const int nl = std::min(late_layers, T);
        const auto [early, late] =
            block_similarity(sim, block_range(1, ne), block_range(T - nl + 1, T));
        tj["early_block_similarity"] = early;
        tj["late_block_similarity"] = late;
        early_sim[ti] = early;

        const SpectrumReport spec = spectrum_report_from_json(
            load_json((fs::path(run_dir) / (std::string(twin) + ".spectral.json")).string()));
        ordered_json alphas = ordered_json::array();
        for (const auto & la : spec.layers) {
            if (la.mean_alpha)
                alphas.push_back(*la.mean_alpha);
            else
                alphas.push_back(nullptr);
        }
        tj["layer_mean_alpha"] = alphas;

        ordered_json evals = ordered_json::object();
        const std::string prefix = std::string(twin) + ".eval.";
        std::vector<fs::path> eval_paths;
        for (const auto & entry : fs::directory_iterator(run_dir)) {
            const std::string fname = entry.path().filename().string();
            if (fname.rfind(prefix, 0) == 0 && fname.size() > prefix.size() + 5 &&
                fname.compare(fname.size() - 5, 5, ".json") == 0)
                eval_paths.push_back(entry.path());
        }
        std::sort(eval_paths.begin(), eval_paths.end());
        for (const auto & path : eval_paths) {
            const std::string fname = path.filename().string();
            const std::string setting = fname.substr(prefix.size(), fname.size() - prefix.size() - 5);
            const ordered_json e = load_json(path.string());
            evals[setting] = {{"loss", e.at("loss")}, {"perplexity", e.at("perplexity")}};
        }
        tj["eval"] = evals;
        out[twin] = tj;
    }

    ordered_json cmp;
    cmp["dlm_minus_ar_early_similarity"] = early_sim[1] - early_sim[0];
    for (int ti = 0; ti < 2; ++ti) {
        const char * twin = twins[ti];
        const auto & evals = out[twin]["eval"];
        if (evals.contains("eis") && evals.contains("dis")) {
            cmp[std::string(twin) + "_eis_minus_dis_perplexity"] =
                evals["eis"]["perplexity"].get<double>() - evals["dis"]["perplexity"].get<double>();
        }
    }
    out["comparisons"] = cmp;
    return out;
}

} // namespace ltwin
