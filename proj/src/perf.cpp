#include "gateway/perf.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace gateway {

void to_json(nlohmann::json& j, const PerfSample& s)
{
    j = nlohmann::json{{"timestamp", format_timestamp(s.timestamp)},
                       {"active_connections", s.active_connections},
                       {"throughput_up", s.throughput_up},
                       {"throughput_down", s.throughput_down}};
    j["cpu_fraction"] = s.cpu_fraction ? nlohmann::json(*s.cpu_fraction) : nlohmann::json();
    j["battery_level"] = s.battery_level ? nlohmann::json(*s.battery_level) : nlohmann::json();
}

std::optional<Millis> read_process_cpu_time()
{
    timespec ts{};
    if (::clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts) != 0)
        return std::nullopt;
    return Millis{static_cast<std::int64_t>(ts.tv_sec) * 1000 + ts.tv_nsec / 1'000'000};
}

std::optional<double> read_battery_level(const std::string& root)
{
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(root, ec))
        return std::nullopt;
    for (const auto& entry : fs::directory_iterator(root, ec)) {
        std::ifstream type_file(entry.path() / "type");
        std::string type;
        if (!(type_file >> type) || type != "Battery")
            continue;
        std::ifstream cap_file(entry.path() / "capacity");
        double capacity = 0;
        if (cap_file >> capacity)
            return capacity;
    }
    return std::nullopt;
}

PerfSampler::PerfSampler(PerfSources sources, std::size_t retention_samples)
    : sources_(std::move(sources)), ring_(std::max<std::size_t>(1, retention_samples))
{
}

PerfSample PerfSampler::sample(Timestamp now)
{
    PerfSample s;
    s.timestamp = now;
    if (sources_.battery_level)
        s.battery_level = sources_.battery_level();
    if (sources_.active_connections)
        s.active_connections = sources_.active_connections();

    std::optional<Millis> cpu;
    if (sources_.process_cpu_time)
        cpu = sources_.process_cpu_time();
    std::uint64_t up = 0;
    std::uint64_t down = 0;
    if (sources_.byte_totals)
        std::tie(up, down) = sources_.byte_totals();

    std::lock_guard lock(mu_);
    if (last_at_ && now > *last_at_) {
        const double secs = std::chrono::duration<double>(now - *last_at_).count();
        if (cpu && last_cpu_)
            s.cpu_fraction = std::max(0.0, std::chrono::duration<double>(*cpu - *last_cpu_).count() / secs);
        s.throughput_up = up >= last_up_ ? static_cast<double>(up - last_up_) * 8.0 / secs : 0.0;
        s.throughput_down = down >= last_down_ ? static_cast<double>(down - last_down_) * 8.0 / secs : 0.0;
    }
    last_at_ = now;
    last_cpu_ = cpu;
    last_up_ = up;
    last_down_ = down;
    ring_.push(s);
    return s;
}

std::vector<PerfSample> PerfSampler::samples_between(Timestamp from, Timestamp to) const
{
    std::lock_guard lock(mu_);
    return ring_.collect([&](const PerfSample& s) { return s.timestamp >= from && s.timestamp <= to; });
}

std::vector<PerfSample> PerfSampler::all() const
{
    std::lock_guard lock(mu_);
    return ring_.collect([](const PerfSample&) { return true; });
}

std::optional<PerfSample> PerfSampler::latest() const
{
    std::lock_guard lock(mu_);
    if (ring_.empty())
        return std::nullopt;
    return ring_.back();
}

} // namespace gateway
