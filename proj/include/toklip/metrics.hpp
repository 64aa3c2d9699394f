#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "toklip/common.hpp"

namespace toklip {

// Append-only JSONL metrics log: one row per step, monotonically increasing
// step numbers per run, config hash embedded in every row.
class MetricsWriter {
  public:
    MetricsWriter() = default;
    MetricsWriter(const std::string& path, std::string run_id, uint64_t config_hash);

    void row(int64_t step, const std::vector<std::pair<std::string, double>>& values);

  private:
    std::ofstream file_;
    std::string run_id_;
    uint64_t config_hash_ = 0;
    int64_t last_step_ = -1;
};

struct MetricsRow {
    std::string run_id;
    uint64_t config_hash = 0;
    int64_t step = 0;
    std::vector<std::pair<std::string, double>> values;
};

std::vector<MetricsRow> read_metrics(const std::string& path);

// Summary CSV: header comment with the config hash, then metric,value rows.
void write_summary_csv(const std::string& path, uint64_t config_hash,
                       const std::vector<std::pair<std::string, double>>& rows);
std::vector<std::pair<std::string, double>> read_summary_csv(const std::string& path);

}  // namespace toklip
