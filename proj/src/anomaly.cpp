#include "gateway/anomaly.hpp"

namespace gateway {

void ConsumptionBaseline::add_sample(double rate, double weight)
{
    if (rate < 0)
        rate = 0;
    baseline_rate = sample_count == 0 ? rate : weight * rate + (1.0 - weight) * baseline_rate;
    ++sample_count;
}

std::optional<AnomalyAlert> check_anomaly(Ipv4Address client_ip, double current_rate,
                                          const ConsumptionBaseline& baseline, double multiplier,
                                          std::uint32_t min_samples)
{
    if (baseline.sample_count < min_samples)
        return std::nullopt;
    if (!(current_rate > multiplier * baseline.baseline_rate))
        return std::nullopt;
    AnomalyAlert alert;
    alert.client_ip = client_ip;
    alert.rate = current_rate;
    alert.baseline = baseline.baseline_rate;
    alert.multiplier = multiplier;
    return alert;
}

namespace {

std::int64_t unix_second(Timestamp t)
{
    return to_unix_millis(t) / 1000;
}

} // namespace

void RateWindow::expire(Timestamp now)
{
    const std::int64_t window_secs = std::max<std::int64_t>(1, window_.count() / 1000);
    const std::int64_t oldest = unix_second(now) - window_secs + 1;
    while (!buckets_.empty() && buckets_.front().first < oldest) {
        total_ -= buckets_.front().second;
        buckets_.pop_front();
    }
}

void RateWindow::add(Timestamp now, std::uint64_t bytes)
{
    const auto sec = unix_second(now);
    if (!buckets_.empty() && buckets_.back().first == sec)
        buckets_.back().second += bytes;
    else
        buckets_.emplace_back(sec, bytes);
    total_ += bytes;
    expire(now);
}

double RateWindow::rate(Timestamp now)
{
    expire(now);
    const double window_secs = std::max<double>(1.0, static_cast<double>(window_.count() / 1000));
    return static_cast<double>(total_) / window_secs;
}

ConsumptionTracker::ClientState& ConsumptionTracker::state(Ipv4Address ip)
{
    auto it = clients_.find(ip);
    if (it == clients_.end())
        it = clients_.emplace(ip, ClientState{RateWindow{settings_.window}, {}, {}}).first;
    return it->second;
}

void ConsumptionTracker::on_bytes(Ipv4Address ip, std::uint64_t bytes, Timestamp now)
{
    state(ip).window.add(now, bytes);
}

void ConsumptionTracker::on_session_finished(Ipv4Address ip, std::uint64_t total_bytes, Millis duration)
{
    // Sessions shorter than a second are measured as one second long.
    const double secs = std::max(1.0, static_cast<double>(duration.count()) / 1000.0);
    state(ip).baseline.add_sample(static_cast<double>(total_bytes) / secs, settings_.baseline_weight);
}

std::optional<AnomalyAlert> ConsumptionTracker::evaluate(Ipv4Address ip, Timestamp now)
{
    auto& s = state(ip);
    if (s.last_alert && now - *s.last_alert < settings_.debounce)
        return std::nullopt;
    auto alert = check_anomaly(ip, s.window.rate(now), s.baseline, settings_.multiplier, settings_.min_samples);
    if (alert) {
        alert->at = now;
        s.last_alert = now;
    }
    return alert;
}

std::vector<Ipv4Address> ConsumptionTracker::tracked_clients() const
{
    std::vector<Ipv4Address> out;
    out.reserve(clients_.size());
    for (const auto& [ip, _] : clients_)
        out.push_back(ip);
    return out;
}

ConsumptionBaseline ConsumptionTracker::baseline(Ipv4Address ip) const
{
    auto it = clients_.find(ip);
    return it == clients_.end() ? ConsumptionBaseline{} : it->second.baseline;
}

} // namespace gateway
