#pragma once

#include "gateway/common.hpp"

#include <deque>
#include <map>

namespace gateway {

struct AnomalySettings {
    double multiplier = 3.0;
    Millis window{60'000};
    Millis debounce{5 * 60'000};
    std::uint32_t min_samples = 3;
    double baseline_weight = 0.3;

    friend bool operator==(const AnomalySettings&, const AnomalySettings&) = default;
};

/// Exponentially weighted mean of per-session consumption rates (bytes/second).
struct ConsumptionBaseline {
    double baseline_rate = 0.0;
    std::uint32_t sample_count = 0;

    void add_sample(double rate, double weight);
};

struct AnomalyAlert {
    Ipv4Address client_ip;
    std::string identifier;
    double rate = 0;       // bytes/second over the window
    double baseline = 0;   // bytes/second
    double multiplier = 0;
    Timestamp at{};
};

/// Alert iff the baseline has at least `min_samples` samples and current_rate > multiplier * baseline.
std::optional<AnomalyAlert> check_anomaly(Ipv4Address client_ip, double current_rate,
                                          const ConsumptionBaseline& baseline, double multiplier,
                                          std::uint32_t min_samples = 3);

/// Bytes observed over a sliding window, bucketed per second.
class RateWindow {
public:
    explicit RateWindow(Millis window = Millis{60'000}) : window_(window) {}

    void add(Timestamp now, std::uint64_t bytes);
    /// Average bytes/second over the window ending at `now`.
    double rate(Timestamp now);

private:
    void expire(Timestamp now);

    Millis window_;
    std::deque<std::pair<std::int64_t, std::uint64_t>> buckets_; // (unix second, bytes)
    std::uint64_t total_ = 0;
};

/// Per-client rate windows, baselines and alert de-bounce. Not internally synchronized.
class ConsumptionTracker {
public:
    explicit ConsumptionTracker(AnomalySettings settings = {}) : settings_(settings) {}

    void set_settings(const AnomalySettings& s) { settings_ = s; }
    const AnomalySettings& settings() const { return settings_; }

    void on_bytes(Ipv4Address ip, std::uint64_t bytes, Timestamp now);
    /// Folds a finished session's average rate into the client's baseline.
    void on_session_finished(Ipv4Address ip, std::uint64_t total_bytes, Millis duration);

    /// Evaluates the client now; at most one alert per de-bounce period.
    std::optional<AnomalyAlert> evaluate(Ipv4Address ip, Timestamp now);
    std::vector<Ipv4Address> tracked_clients() const;

    ConsumptionBaseline baseline(Ipv4Address ip) const;
    void set_baseline(Ipv4Address ip, ConsumptionBaseline b) { clients_[ip].baseline = b; }

private:
    struct ClientState {
        RateWindow window;
        ConsumptionBaseline baseline;
        std::optional<Timestamp> last_alert;
    };
    ClientState& state(Ipv4Address ip);

    AnomalySettings settings_;
    std::map<Ipv4Address, ClientState> clients_;
};

} // namespace gateway
