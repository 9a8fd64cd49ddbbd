#pragma once

#include "gateway/events.hpp"
#include "gateway/manager.hpp"
#include "gateway/meter.hpp"
#include "gateway/perf.hpp"
#include "gateway/provisioning.hpp"

#include <atomic>
#include <functional>
#include <memory>
#include <thread>

namespace httplib {
class Server;
}

namespace gateway {

struct ControlContext {
    TrafficMeter* meter = nullptr;
    TrafficManager* manager = nullptr;
    PerfSampler* perf = nullptr;
    EventBus* events = nullptr;
    const Clock* clock = &system_clock();

    /// Body of GET /api/status.
    std::function<nlohmann::json()> status;
    std::function<ProvisioningInfo()> provisioning;
    Cidr lan;

    /// Required from non-loopback peers when set.
    std::optional<Credentials> auth;
    /// Static dashboard files served at /, empty for a placeholder page.
    std::string dashboard_dir;
    /// Longest an idle event stream waits before sending a keepalive comment.
    Millis keepalive{15'000};
};

/// JSON API, SSE event stream, PAC and help page on the control listener.
class ControlApi {
public:
    explicit ControlApi(ControlContext ctx);
    ~ControlApi();

    ControlApi(const ControlApi&) = delete;
    ControlApi& operator=(const ControlApi&) = delete;

    /// Binds every address on the same port (port 0 = ephemeral, chosen by the first bind).
    /// Throws BindError.
    void start(const std::vector<Ipv4Address>& addresses, std::uint16_t port);
    void stop();

    std::uint16_t port() const { return port_; }

private:
    void install_routes(httplib::Server& server);

    ControlContext ctx_;
    std::vector<std::unique_ptr<httplib::Server>> servers_;
    std::vector<std::thread> threads_;
    std::atomic<bool> stopping_{false};
    std::uint16_t port_ = 0;
};

} // namespace gateway
