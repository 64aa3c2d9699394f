#include "toklip/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <sstream>

namespace toklip {

using nlohmann::json;

MetricsWriter::MetricsWriter(const std::string& path, std::string run_id, uint64_t config_hash)
    : run_id_(std::move(run_id)), config_hash_(config_hash) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    file_.open(path, std::ios::app);
    require(file_.good(), "metrics: cannot open " + path);
}

void MetricsWriter::row(int64_t step, const std::vector<std::pair<std::string, double>>& values) {
    require(file_.is_open(), "metrics: writer not initialized");
    require(step > last_step_, "metrics: steps must be strictly increasing");
    last_step_ = step;
    json j;
    j["run_id"] = run_id_;
    j["config_hash"] = config_hash_;
    j["step"] = step;
    for (const auto& [k, v] : values) j[k] = v;
    file_ << j.dump() << '\n';
    file_.flush();
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "metrics: cannot open " + path);
    std::vector<MetricsRow> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        MetricsRow r;
        r.run_id = j.at("run_id").get<std::string>();
        r.config_hash = j.at("config_hash").get<uint64_t>();
        r.step = j.at("step").get<int64_t>();
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "run_id" || it.key() == "config_hash" || it.key() == "step") continue;
            r.values.emplace_back(it.key(), it.value().get<double>());
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_summary_csv(const std::string& path, uint64_t config_hash,
                       const std::vector<std::pair<std::string, double>>& rows) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path);
    require(f.good(), "summary: cannot open " + path);
    f << "# config_hash," << config_hash << "\n";
    f << "metric,value\n";
    f.precision(12);
    for (const auto& [k, v] : rows) f << k << "," << v << "\n";
}

std::vector<std::pair<std::string, double>> read_summary_csv(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "summary: cannot open " + path);
    std::vector<std::pair<std::string, double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("metric,", 0) == 0) continue;
        size_t comma = line.rfind(',');
        require(comma != std::string::npos, "summary: bad row " + line);
        rows.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
    }
    return rows;
}

}  // namespace toklip
