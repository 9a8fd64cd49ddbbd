#pragma once

#include <chrono>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>

namespace gateway {

/// Runs `fn` on a fixed-rate schedule on its own thread until stopped or destroyed.
/// The first run happens immediately.
class PeriodicTask {
public:
    PeriodicTask() = default;
    PeriodicTask(std::chrono::milliseconds interval, std::function<void()> fn) { start(interval, std::move(fn)); }
    ~PeriodicTask() { stop(); }

    PeriodicTask(const PeriodicTask&) = delete;
    PeriodicTask& operator=(const PeriodicTask&) = delete;

    void start(std::chrono::milliseconds interval, std::function<void()> fn)
    {
        stop();
        stopping_ = false;
        thread_ = std::thread([this, interval, fn = std::move(fn)] {
            auto next = std::chrono::steady_clock::now();
            std::unique_lock lock(mu_);
            while (!stopping_) {
                lock.unlock();
                fn();
                lock.lock();
                next += interval;
                // Skip missed ticks instead of bursting to catch up.
                const auto now = std::chrono::steady_clock::now();
                while (next <= now)
                    next += interval;
                cv_.wait_until(lock, next, [this] { return stopping_; });
            }
        });
    }

    void stop()
    {
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        if (thread_.joinable())
            thread_.join();
    }

    bool running() const { return thread_.joinable(); }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    std::thread thread_;
};

} // namespace gateway
