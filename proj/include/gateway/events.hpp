#pragma once

#include "gateway/common.hpp"

#include <condition_variable>
#include <deque>
#include <mutex>

#include <nlohmann/json.hpp>

namespace gateway {

enum class EventType {
    client_joined,
    client_left,
    block,
    unblock,
    anomaly,
    perf_sample,
    session_opened,
    session_closed,
};

std::string_view to_string(EventType t);

struct ApiEvent {
    std::uint64_t seq = 0;
    EventType type{};
    nlohmann::json payload; ///< object; serialized flattened next to seq and type

    nlohmann::json to_json() const;
};

/// Ordered, replayable event log with bounded memory. Producers never block on
/// consumers: a reader that falls behind the buffer gets an overflow result instead.
class EventBus {
public:
    explicit EventBus(std::size_t capacity = 4096) : capacity_(capacity) {}

    std::uint64_t publish(EventType type, nlohmann::json payload);

    struct ReadResult {
        std::vector<ApiEvent> events;
        bool overflow = false; ///< events after `since` were already evicted
        bool closed = false;
    };

    /// Events with seq > since, waiting up to `wait` for at least one to arrive.
    ReadResult read_after(std::uint64_t since, Millis wait = Millis::zero(), std::size_t max = 256) const;

    std::uint64_t last_seq() const;
    std::size_t capacity() const { return capacity_; }

    /// Wakes all readers; subsequent reads report closed.
    void close();

private:
    const std::size_t capacity_;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::deque<ApiEvent> buffer_;
    std::uint64_t next_seq_ = 1;
    bool closed_ = false;
};

} // namespace gateway
