#pragma once

#include "gateway/common.hpp"
#include "gateway/ring_buffer.hpp"

#include <functional>
#include <mutex>

#include <nlohmann/json_fwd.hpp>

namespace gateway {

struct PerfSample {
    Timestamp timestamp{};
    std::optional<double> cpu_fraction;  ///< of one core; may exceed 1.0 on multicore hosts
    std::optional<double> battery_level; ///< percent
    std::uint64_t active_connections = 0;
    double throughput_up = 0;   ///< bits/second
    double throughput_down = 0; ///< bits/second
};

void to_json(nlohmann::json& j, const PerfSample& s);

/// Metric readers. Any reader may be empty or return nullopt; that field is then absent.
struct PerfSources {
    std::function<std::optional<Millis>()> process_cpu_time;
    std::function<std::optional<double>()> battery_level;
    std::function<std::uint64_t()> active_connections;
    std::function<std::pair<std::uint64_t, std::uint64_t>()> byte_totals; ///< (up, down)
};

std::optional<Millis> read_process_cpu_time();
/// First "Battery" supply under `root` exposing a capacity file.
std::optional<double> read_battery_level(const std::string& root = "/sys/class/power_supply");

class PerfSampler {
public:
    PerfSampler(PerfSources sources, std::size_t retention_samples);

    /// Takes a sample using deltas since the previous call and stores it.
    PerfSample sample(Timestamp now);

    std::vector<PerfSample> samples_between(Timestamp from, Timestamp to) const;
    std::vector<PerfSample> all() const;
    std::optional<PerfSample> latest() const;

private:
    PerfSources sources_;
    mutable std::mutex mu_;
    RingBuffer<PerfSample> ring_;

    std::optional<Timestamp> last_at_;
    std::optional<Millis> last_cpu_;
    std::uint64_t last_up_ = 0;
    std::uint64_t last_down_ = 0;
};

} // namespace gateway
