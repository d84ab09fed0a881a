// cost_model.hpp - analytical CPU / GPU / PCIe latency model and its calibration
//
// GPU expert time is flat in the token load up to a saturation point and
// linear beyond it. CPU expert time is linear in load, with a multiplicative
// penalty on the first expert of each per-layer burst (cold caches). Transfers
// cost a fixed latency plus bytes / bandwidth.
//
// Durations are dimensionless simulation units. The built-in profiles use
// milliseconds.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moesim/model.hpp"

namespace moesim {

struct HardwareProfile {
    double gpu_time_per_expert = 1.0;
    uint32_t gpu_saturation_load = 256;
    double gpu_slope = 0.0;
    double cpu_slope = 1.0;
    double cpu_first_expert_penalty = 1.4;
    double transfer_bandwidth = 1.0;  // bytes per unit
    double transfer_latency = 0.0;
    double shared_expert_time = 0.0;  // per layer, GPU
    double non_expert_time = 0.0;     // per layer

    bool operator==(const HardwareProfile&) const = default;
};

std::vector<std::string> profile_problems(const HardwareProfile& p);
void require_valid(const HardwareProfile& p);

double gpu_time(const HardwareProfile& p, uint32_t load);
double cpu_time(const HardwareProfile& p, uint32_t load, size_t position_in_burst);
double transfer_time(const HardwareProfile& p, double expert_size_bytes);

// A profile bound to one model: every routed expert has the same size, so
// the transfer time is computed once.
class CostModel {
public:
    CostModel(HardwareProfile profile, uint64_t expert_bytes);
    CostModel(HardwareProfile profile, const ModelConfig& config);

    const HardwareProfile& profile() const { return profile_; }
    uint64_t expert_bytes() const { return expert_bytes_; }

    double gpu(uint32_t load) const { return gpu_time(profile_, load); }
    double cpu(uint32_t load, size_t position) const { return cpu_time(profile_, load, position); }
    double transfer() const { return transfer_; }

private:
    HardwareProfile profile_;
    uint64_t expert_bytes_;
    double transfer_;
};

// Desk-scale stand-in for a workstation GPU + 10-core server CPU + PCIe 4.0
// x16 link, scaled by the model's expert sizes. Units: milliseconds.
HardwareProfile default_profile(const ModelConfig& config);

// Unit-cost profile used in the worked scheduling examples: GPU compute 1,
// CPU compute 1 per token, transfer 3, no first-expert penalty.
HardwareProfile unit_profile();

struct CalibrationSample {
    Device device = Device::kCpu;
    double load = 0.0;  // tokens for cpu/gpu, bytes for pcie
    uint32_t position = 0;
    double duration = 0.0;
};

struct CalibrationReport {
    HardwareProfile profile;
    double cpu_rms = 0.0;
    double gpu_rms = 0.0;
    double pcie_rms = 0.0;
    size_t cpu_samples = 0;
    size_t gpu_samples = 0;
    size_t pcie_samples = 0;
};

// Least-squares fit of the cost model to warm-up measurements. Fields that
// the samples cannot determine (saturation point, shared / non-expert time)
// are carried over from `base`. Throws DataError naming the parameter that is
// underdetermined.
CalibrationReport calibrate(std::span<const CalibrationSample> samples,
                            const HardwareProfile& base = HardwareProfile{});

// Noiseless samples drawn from `profile`; used for self-checks and by the CLI.
std::vector<CalibrationSample> synthesize_samples(const HardwareProfile& profile, uint64_t expert_bytes);

// Sample file: "device,load,position,duration" per line; '#' starts a comment.
std::vector<CalibrationSample> read_samples(std::istream& in);
void write_samples(std::ostream& out, std::span<const CalibrationSample> samples);

// Profile file: flat key=value lines.
HardwareProfile read_profile(std::istream& in);
void write_profile(std::ostream& out, const HardwareProfile& p);

}  // namespace moesim
