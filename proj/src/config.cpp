#include "toklip/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace toklip {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw ConfigError("config: bad integer for " + key + ": " + v);
        return x;
    } catch (const ValueError&) {
        throw;
    } catch (...) {
        throw ConfigError("config: bad integer for " + key + ": " + v);
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw ConfigError("config: bad number for " + key + ": " + v);
        return x;
    } catch (const ValueError&) {
        throw;
    } catch (...) {
        throw ConfigError("config: bad number for " + key + ": " + v);
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad bool for " + key + ": " + v);
}

std::vector<uint64_t> to_seed_list(const std::string& key, const std::string& v) {
    std::vector<uint64_t> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (!part.empty()) out.push_back(static_cast<uint64_t>(to_int(key, part)));
    }
    if (out.empty()) throw ConfigError("config: empty seed list");
    return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& raw) {
    std::string v = unquote(trim(raw));
    if (key == "stage") stage = v;
    else if (key == "seed") seed = static_cast<uint64_t>(to_int(key, v));
    else if (key == "seeds") seeds = to_seed_list(key, v);
    else if (key == "data_dir") data_dir = v;
    else if (key == "run_dir") run_dir = v;
    else if (key == "vq_ckpt") vq_ckpt = v;
    else if (key == "teacher_ckpt") teacher_ckpt = v;
    else if (key == "toklip_ckpt") toklip_ckpt = v;
    else if (key == "ar_ckpt") ar_ckpt = v;
    else if (key == "threads") threads = static_cast<int>(to_int(key, v));
    else if (key == "n_train") n_train = static_cast<int>(to_int(key, v));
    else if (key == "n_test") n_test = static_cast<int>(to_int(key, v));
    else if (key == "base_lr") base_lr = to_double(key, v);
    else if (key == "base_warmup") base_warmup = static_cast<int>(to_int(key, v));
    else if (key == "vq.steps") vq_steps = static_cast<int>(to_int(key, v));
    else if (key == "vq.batch") vq_batch = static_cast<int>(to_int(key, v));
    else if (key == "vq.lr_scale") vq_lr_scale = to_double(key, v);
    else if (key == "vq.warmup_scale") vq_warmup_scale = to_double(key, v);
    else if (key == "teacher.steps") teacher_steps = static_cast<int>(to_int(key, v));
    else if (key == "teacher.batch") teacher_batch = static_cast<int>(to_int(key, v));
    else if (key == "teacher.lr_scale") teacher_lr_scale = to_double(key, v);
    else if (key == "teacher.warmup_scale") teacher_warmup_scale = to_double(key, v);
    else if (key == "toklip.steps") toklip_steps = static_cast<int>(to_int(key, v));
    else if (key == "toklip.batch") toklip_batch = static_cast<int>(to_int(key, v));
    else if (key == "toklip.lr_scale") toklip_lr_scale = to_double(key, v);
    else if (key == "toklip.warmup_scale") toklip_warmup_scale = to_double(key, v);
    else if (key == "toklip.attention") toklip_attention = v;
    else if (key == "toklip.mapping") toklip_mapping = v;
    else if (key == "toklip.distill") toklip_distill = v;
    else if (key == "toklip.init") toklip_init = v;
    else if (key == "ar.steps") ar_steps = static_cast<int>(to_int(key, v));
    else if (key == "ar.batch") ar_batch = static_cast<int>(to_int(key, v));
    else if (key == "ar.lr_scale") ar_lr_scale = to_double(key, v);
    else if (key == "ar.warmup_scale") ar_warmup_scale = to_double(key, v);
    else if (key == "ar.fusion") ar_fusion = v;
    else if (key == "sampler.cfg_scale") sampler_cfg_scale = to_double(key, v);
    else if (key == "sampler.top_k") sampler_top_k = static_cast<int>(to_int(key, v));
    else if (key == "sampler.top_p") sampler_top_p = to_double(key, v);
    else if (key == "sampler.temperature") sampler_temperature = to_double(key, v);
    else if (key == "sampler.greedy") sampler_greedy = to_bool(key, v);
    else if (key == "sampler.n") sampler_n = static_cast<int>(to_int(key, v));
    else if (key == "sampler.class_id") sampler_class_id = static_cast<int>(to_int(key, v));
    else if (key == "eval.task") eval_task = v;
    else throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw ConfigError("config: cannot open " + path);
    std::string line, section;
    int line_no = 0;
    while (std::getline(f, line)) {
        line_no++;
        size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config: bad section at line " + std::to_string(line_no));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!section.empty()) key = section + "." + key;
        apply(key, value);
    }
}

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig cfg;
    cfg.apply_file(path);
    return cfg;
}

std::string RunConfig::canonical() const {
    std::ostringstream os;
    os << "stage=" << stage << ";seed=" << seed << ";seeds=";
    for (auto s : seeds) os << s << ",";
    os << ";data_dir=" << data_dir << ";run_dir=" << run_dir << ";n_train=" << n_train
       << ";n_test=" << n_test << ";base_lr=" << base_lr << ";base_warmup=" << base_warmup
       << ";vq=" << vq_steps << "," << vq_batch << "," << vq_lr_scale << "," << vq_warmup_scale
       << ";teacher=" << teacher_steps << "," << teacher_batch << "," << teacher_lr_scale << ","
       << teacher_warmup_scale << ";toklip=" << toklip_steps << "," << toklip_batch << ","
       << toklip_lr_scale << "," << toklip_warmup_scale << "," << toklip_attention << ","
       << toklip_mapping << "," << toklip_distill << "," << toklip_init << ";ar=" << ar_steps << ","
       << ar_batch << "," << ar_lr_scale << "," << ar_warmup_scale << "," << ar_fusion
       << ";sampler=" << sampler_cfg_scale << "," << sampler_top_k << "," << sampler_top_p << ","
       << sampler_temperature << "," << sampler_greedy << "," << sampler_n << "," << sampler_class_id
       << ";eval=" << eval_task;
    return os.str();
}

int RunConfig::effective_threads() const {
    if (threads > 0) return threads;
    if (const char* env = std::getenv("TOKLIP_THREADS")) {
        int t = std::atoi(env);
        if (t > 0) return t;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace toklip
