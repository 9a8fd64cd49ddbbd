#include "gateway/events.hpp"

namespace gateway {

std::string_view to_string(EventType t)
{
    switch (t) {
    case EventType::client_joined: return "client_joined";
    case EventType::client_left: return "client_left";
    case EventType::block: return "block";
    case EventType::unblock: return "unblock";
    case EventType::anomaly: return "anomaly";
    case EventType::perf_sample: return "perf_sample";
    case EventType::session_opened: return "session_opened";
    case EventType::session_closed: return "session_closed";
    }
    return "unknown";
}

nlohmann::json ApiEvent::to_json() const
{
    nlohmann::json j = payload.is_object() ? payload : nlohmann::json::object();
    j["seq"] = seq;
    j["type"] = to_string(type);
    return j;
}

std::uint64_t EventBus::publish(EventType type, nlohmann::json payload)
{
    std::uint64_t seq;
    {
        std::lock_guard lock(mu_);
        seq = next_seq_++;
        buffer_.push_back({seq, type, std::move(payload)});
        while (buffer_.size() > capacity_)
            buffer_.pop_front();
    }
    cv_.notify_all();
    return seq;
}

EventBus::ReadResult EventBus::read_after(std::uint64_t since, Millis wait, std::size_t max) const
{
    std::unique_lock lock(mu_);
    if (wait > Millis::zero())
        cv_.wait_for(lock, wait, [&] { return closed_ || next_seq_ - 1 > since; });

    ReadResult r;
    r.closed = closed_;
    if (buffer_.empty() || buffer_.back().seq <= since)
        return r;
    const std::uint64_t oldest = buffer_.front().seq;
    if (since + 1 < oldest) {
        r.overflow = true;
        return r;
    }
    for (std::size_t i = static_cast<std::size_t>(since + 1 - oldest); i < buffer_.size() && r.events.size() < max; ++i)
        r.events.push_back(buffer_[i]);
    return r;
}

std::uint64_t EventBus::last_seq() const
{
    std::lock_guard lock(mu_);
    return next_seq_ - 1;
}

void EventBus::close()
{
    {
        std::lock_guard lock(mu_);
        closed_ = true;
    }
    cv_.notify_all();
}

} // namespace gateway
