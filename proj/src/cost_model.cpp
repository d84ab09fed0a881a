#include "moesim/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace moesim {

std::vector<std::string> profile_problems(const HardwareProfile& p) {
    std::vector<std::string> out;
    auto nonneg = [&](double v, const char* name) {
        if (!(v >= 0.0) || !std::isfinite(v)) out.push_back(std::string(name) + " must be >= 0");
    };
    nonneg(p.gpu_time_per_expert, "gpu_time_per_expert");
    nonneg(p.gpu_slope, "gpu_slope");
    nonneg(p.cpu_slope, "cpu_slope");
    nonneg(p.transfer_latency, "transfer_latency");
    nonneg(p.shared_expert_time, "shared_expert_time");
    nonneg(p.non_expert_time, "non_expert_time");
    if (!(p.cpu_first_expert_penalty >= 1.0)) out.emplace_back("cpu_first_expert_penalty must be >= 1");
    if (!(p.transfer_bandwidth > 0.0) || !std::isfinite(p.transfer_bandwidth))
        out.emplace_back("transfer_bandwidth must be > 0");
    return out;
}

void require_valid(const HardwareProfile& p) {
    auto problems = profile_problems(p);
    if (!problems.empty()) throw ContractError("invalid hardware profile: " + problems.front());
}

double gpu_time(const HardwareProfile& p, uint32_t load) {
    if (load == 0) throw ContractError("gpu_time: zero-load experts are never scheduled");
    if (load <= p.gpu_saturation_load) return p.gpu_time_per_expert;
    return p.gpu_time_per_expert + p.gpu_slope * static_cast<double>(load - p.gpu_saturation_load);
}

double cpu_time(const HardwareProfile& p, uint32_t load, size_t position_in_burst) {
    if (load == 0) throw ContractError("cpu_time: zero-load experts are never scheduled");
    const double base = p.cpu_slope * static_cast<double>(load);
    return position_in_burst == 0 ? base * p.cpu_first_expert_penalty : base;
}

double transfer_time(const HardwareProfile& p, double expert_size_bytes) {
    if (!(expert_size_bytes >= 1.0)) throw ContractError("transfer_time: expert size must be >= 1 byte");
    return p.transfer_latency + std::ceil(expert_size_bytes) / p.transfer_bandwidth;
}

CostModel::CostModel(HardwareProfile profile, uint64_t expert_bytes)
    : profile_(profile), expert_bytes_(expert_bytes) {
    require_valid(profile_);
    transfer_ = transfer_time(profile_, static_cast<double>(expert_bytes_));
}

CostModel::CostModel(HardwareProfile profile, const ModelConfig& config)
    : CostModel(profile, moesim::expert_bytes(config)) {}

namespace {
constexpr double kPcieBytesPerMs = 2.0e7;      // ~20 GB/s effective
constexpr double kGpuBytesPerMs = 6.0e8;       // ~600 GB/s effective HBM/GDDR
constexpr double kGpuFlopsPerMs = 1.0e11;      // ~100 TFLOP/s effective
constexpr double kCpuBytesPerMs = 5.0e7;       // ~50 GB/s across 10 cores
constexpr double kLaunchOverheadMs = 0.01;

double gpu_flat_time(uint64_t bytes) { return kLaunchOverheadMs + static_cast<double>(bytes) / kGpuBytesPerMs; }
}  // namespace

HardwareProfile default_profile(const ModelConfig& config) {
    const uint64_t bytes = expert_bytes(config);
    HardwareProfile p;
    p.gpu_time_per_expert = gpu_flat_time(bytes);
    p.gpu_saturation_load = 256;
    p.gpu_slope = 6.0 * static_cast<double>(config.routed_dims.hidden) *
                  static_cast<double>(config.routed_dims.intermediate) / kGpuFlopsPerMs;
    p.cpu_slope = static_cast<double>(bytes) / kCpuBytesPerMs;
    p.cpu_first_expert_penalty = 1.4;
    p.transfer_bandwidth = kPcieBytesPerMs;
    p.transfer_latency = kLaunchOverheadMs;
    p.shared_expert_time = config.num_shared * gpu_flat_time(shared_expert_bytes(config));
    p.non_expert_time = 0.0;
    return p;
}

HardwareProfile unit_profile() {
    HardwareProfile p;
    p.gpu_time_per_expert = 1.0;
    p.gpu_saturation_load = 256;
    p.gpu_slope = 0.0;
    p.cpu_slope = 1.0;
    p.cpu_first_expert_penalty = 1.0;
    p.transfer_bandwidth = 1.0;
    p.transfer_latency = 0.0;
    return p;
}

namespace {

// Slope of a least-squares line through the origin.
double origin_slope(const std::vector<std::pair<double, double>>& xy) {
    double sxy = 0.0, sxx = 0.0;
    for (auto [x, y] : xy) {
        sxy += x * y;
        sxx += x * x;
    }
    return sxx > 0.0 ? sxy / sxx : 0.0;
}

bool all_same_x(const std::vector<std::pair<double, double>>& xy) {
    return std::all_of(xy.begin(), xy.end(), [&](const auto& p) { return p.first == xy.front().first; });
}

double rms(const std::vector<double>& r) {
    if (r.empty()) return 0.0;
    double s = 0.0;
    for (double v : r) s += v * v;
    return std::sqrt(s / static_cast<double>(r.size()));
}

}  // namespace

CalibrationReport calibrate(std::span<const CalibrationSample> samples, const HardwareProfile& base) {
    std::vector<std::pair<double, double>> cpu_first, cpu_rest, gpu_flat, gpu_sat, pcie;
    size_t n_cpu = 0, n_gpu = 0;
    for (const auto& s : samples) {
        if (!(s.load > 0.0) || !(s.duration >= 0.0))
            throw DataError("calibration sample with non-positive load or negative duration");
        switch (s.device) {
            case Device::kCpu:
                ++n_cpu;
                (s.position == 0 ? cpu_first : cpu_rest).emplace_back(s.load, s.duration);
                break;
            case Device::kGpu:
                ++n_gpu;
                (s.load <= base.gpu_saturation_load ? gpu_flat : gpu_sat).emplace_back(s.load, s.duration);
                break;
            case Device::kPcie: pcie.emplace_back(s.load, s.duration); break;
        }
    }

    if (n_cpu < 2) throw DataError("calibration: need >= 2 cpu samples (cpu_slope underdetermined)");
    if (n_gpu < 2) throw DataError("calibration: need >= 2 gpu samples (gpu_time_per_expert underdetermined)");
    if (pcie.size() < 2) throw DataError("calibration: need >= 2 pcie samples (transfer_bandwidth underdetermined)");
    if (cpu_first.empty())
        throw DataError("calibration: no cpu samples at burst position 0 (cpu_first_expert_penalty underdetermined)");
    if (cpu_rest.empty()) throw DataError("calibration: no cpu samples past burst position 0 (cpu_slope underdetermined)");
    if (all_same_x(cpu_rest) && all_same_x(cpu_first) && cpu_rest.front().first == cpu_first.front().first)
        throw DataError("calibration: all cpu samples share one load (cpu_slope underdetermined)");
    if (gpu_flat.empty())
        throw DataError("calibration: no gpu samples at or below the saturation load (gpu_time_per_expert underdetermined)");
    if (all_same_x(pcie)) throw DataError("calibration: all pcie samples share one size (transfer_bandwidth underdetermined)");

    HardwareProfile p = base;

    p.cpu_slope = origin_slope(cpu_rest);
    if (!(p.cpu_slope > 0.0)) throw DataError("calibration: cpu samples give a non-positive cpu_slope");
    p.cpu_first_expert_penalty = std::max(1.0, origin_slope(cpu_first) / p.cpu_slope);

    double flat_sum = 0.0;
    for (auto [x, y] : gpu_flat) flat_sum += y;
    p.gpu_time_per_expert = flat_sum / static_cast<double>(gpu_flat.size());
    if (!gpu_sat.empty()) {
        std::vector<std::pair<double, double>> excess;
        for (auto [x, y] : gpu_sat) excess.emplace_back(x - base.gpu_saturation_load, y - p.gpu_time_per_expert);
        p.gpu_slope = std::max(0.0, origin_slope(excess));
    }

    // Ordinary least squares: duration = latency + bytes * inv_bandwidth.
    double mx = 0.0, my = 0.0;
    for (auto [x, y] : pcie) {
        mx += x;
        my += y;
    }
    mx /= static_cast<double>(pcie.size());
    my /= static_cast<double>(pcie.size());
    double sxy = 0.0, sxx = 0.0;
    for (auto [x, y] : pcie) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    const double inv_bw = sxy / sxx;
    if (!(inv_bw > 0.0)) throw DataError("calibration: pcie samples give a non-positive transfer_bandwidth");
    p.transfer_bandwidth = 1.0 / inv_bw;
    p.transfer_latency = std::max(0.0, my - inv_bw * mx);

    CalibrationReport report;
    report.profile = p;
    std::vector<double> rc, rg, rp;
    for (const auto& s : samples) {
        switch (s.device) {
            case Device::kCpu:
                rc.push_back(s.duration - cpu_time(p, static_cast<uint32_t>(std::llround(s.load)), s.position));
                break;
            case Device::kGpu:
                rg.push_back(s.duration - gpu_time(p, static_cast<uint32_t>(std::llround(s.load))));
                break;
            case Device::kPcie: rp.push_back(s.duration - transfer_time(p, s.load)); break;
        }
    }
    report.cpu_rms = rms(rc);
    report.gpu_rms = rms(rg);
    report.pcie_rms = rms(rp);
    report.cpu_samples = rc.size();
    report.gpu_samples = rg.size();
    report.pcie_samples = rp.size();
    return report;
}

std::vector<CalibrationSample> synthesize_samples(const HardwareProfile& p, uint64_t expert_bytes) {
    std::vector<CalibrationSample> out;
    for (uint32_t load : {1u, 2u, 4u, 8u, 16u, 32u}) {
        for (uint32_t pos : {0u, 1u, 2u, 3u})
            out.push_back({Device::kCpu, static_cast<double>(load), pos, cpu_time(p, load, pos)});
    }
    for (uint32_t load : {1u, 4u, 16u, 64u, 128u}) {
        if (load <= p.gpu_saturation_load) out.push_back({Device::kGpu, static_cast<double>(load), 0, gpu_time(p, load)});
    }
    for (uint32_t extra : {64u, 256u, 512u}) {
        const uint32_t load = p.gpu_saturation_load + extra;
        out.push_back({Device::kGpu, static_cast<double>(load), 0, gpu_time(p, load)});
    }
    for (double f : {0.25, 0.5, 1.0, 2.0}) {
        const double bytes = std::ceil(f * static_cast<double>(expert_bytes));
        out.push_back({Device::kPcie, bytes, 0, transfer_time(p, bytes)});
    }
    return out;
}

namespace {
std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_number(const std::string& text, size_t line_no, const char* field) {
    try {
        size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw DataError("line " + std::to_string(line_no) + ": bad " + field + " '" + text + "'");
    }
}
}  // namespace

std::vector<CalibrationSample> read_samples(std::istream& in) {
    std::vector<CalibrationSample> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(trim(col));
        if (cols.size() != 4)
            throw DataError("line " + std::to_string(line_no) + ": expected 4 columns device,load,position,duration");
        if (cols[0] == "device") continue;  // header
        auto dev = parse_device(cols[0]);
        if (!dev) throw DataError("line " + std::to_string(line_no) + ": unknown device '" + cols[0] + "'");
        CalibrationSample s;
        s.device = *dev;
        s.load = parse_number(cols[1], line_no, "load");
        s.position = static_cast<uint32_t>(parse_number(cols[2], line_no, "position"));
        s.duration = parse_number(cols[3], line_no, "duration");
        out.push_back(s);
    }
    return out;
}

namespace {
std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace

void write_samples(std::ostream& out, std::span<const CalibrationSample> samples) {
    out << "device,load,position,duration\n";
    for (const auto& s : samples)
        out << device_name(s.device) << ',' << fmt_double(s.load) << ',' << s.position << ','
            << fmt_double(s.duration) << '\n';
}

HardwareProfile read_profile(std::istream& in) {
    HardwareProfile p;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("line " + std::to_string(line_no) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const double v = parse_number(value, line_no, key.c_str());
        if (key == "gpu_time_per_expert") p.gpu_time_per_expert = v;
        else if (key == "gpu_saturation_load") p.gpu_saturation_load = static_cast<uint32_t>(v);
        else if (key == "gpu_slope") p.gpu_slope = v;
        else if (key == "cpu_slope") p.cpu_slope = v;
        else if (key == "cpu_first_expert_penalty") p.cpu_first_expert_penalty = v;
        else if (key == "transfer_bandwidth") p.transfer_bandwidth = v;
        else if (key == "transfer_latency") p.transfer_latency = v;
        else if (key == "shared_expert_time") p.shared_expert_time = v;
        else if (key == "non_expert_time") p.non_expert_time = v;
        else throw DataError("line " + std::to_string(line_no) + ": unknown profile key '" + key + "'");
    }
    auto problems = profile_problems(p);
    if (!problems.empty()) throw DataError("profile: " + problems.front());
    return p;
}

void write_profile(std::ostream& out, const HardwareProfile& p) {
    out << "gpu_time_per_expert=" << fmt_double(p.gpu_time_per_expert) << '\n'
        << "gpu_saturation_load=" << p.gpu_saturation_load << '\n'
        << "gpu_slope=" << fmt_double(p.gpu_slope) << '\n'
        << "cpu_slope=" << fmt_double(p.cpu_slope) << '\n'
        << "cpu_first_expert_penalty=" << fmt_double(p.cpu_first_expert_penalty) << '\n'
        << "transfer_bandwidth=" << fmt_double(p.transfer_bandwidth) << '\n'
        << "transfer_latency=" << fmt_double(p.transfer_latency) << '\n'
        << "shared_expert_time=" << fmt_double(p.shared_expert_time) << '\n'
        << "non_expert_time=" << fmt_double(p.non_expert_time) << '\n';
}

}  // namespace moesim
