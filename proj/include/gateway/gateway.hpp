#pragma once

#include "gateway/config.hpp"
#include "gateway/control_api.hpp"
#include "gateway/events.hpp"
#include "gateway/manager.hpp"
#include "gateway/meter.hpp"
#include "gateway/perf.hpp"
#include "gateway/periodic.hpp"
#include "gateway/provisioning.hpp"
#include "gateway/proxy.hpp"
#include "gateway/store.hpp"
#include "gateway/vpn.hpp"

#include <memory>

namespace gateway {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitBindOrStore = 3;

struct GatewayOptions {
    /// Discovery prober; the ICMP/TCP default when empty.
    std::shared_ptr<Prober> prober;
    const Clock* clock = nullptr;
    /// Skips host interface enumeration (tests).
    std::optional<VpnStatus> vpn_override;
    /// Bind all three listeners to kernel-chosen ports instead of the configured ones.
    bool ephemeral_ports = false;
};

/// All components of one daemon instance, wired together.
class Gateway {
public:
    /// Validates the config and opens the store. Throws ConfigError or StoreError.
    explicit Gateway(GatewayConfig config, GatewayOptions options = {});
    ~Gateway();

    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    /// Binds listeners and starts background loops. Throws BindError.
    void start();
    /// Graceful drain up to `drain`, then hard close; finalizes and flushes every session.
    void stop(Millis drain = Millis{5000});

    const GatewayConfig& config() const { return config_; }
    TrafficMeter& meter() { return *meter_; }
    TrafficManager& manager() { return *manager_; }
    EventBus& events() { return events_; }
    PerfSampler& perf() { return *perf_; }
    SqliteStore& store() { return *store_; }

    std::uint16_t http_port() const;
    std::uint16_t socks_port() const;
    std::uint16_t control_port() const;

    VpnStatus vpn_status() const;
    ProvisioningInfo provisioning() const;
    Ipv4Address advertise_address() const { return advertise_; }
    nlohmann::json status() const;
    const std::vector<std::string>& startup_warnings() const { return warnings_; }

private:
    void refresh_vpn();

    GatewayConfig config_;
    const Clock& clock_;
    std::shared_ptr<Prober> prober_;
    bool vpn_fixed_ = false;

    std::unique_ptr<SqliteStore> store_;
    EventBus events_;
    std::unique_ptr<TrafficMeter> meter_;
    std::unique_ptr<TrafficManager> manager_;
    std::unique_ptr<EgressDialer> dialer_;
    std::unique_ptr<ProxyServer> proxy_;
    std::unique_ptr<PerfSampler> perf_;
    std::unique_ptr<ControlApi> control_;

    PeriodicTask discovery_task_;
    PeriodicTask perf_task_;
    PeriodicTask tick_task_;
    PeriodicTask vpn_task_;

    mutable std::mutex vpn_mu_;
    VpnStatus vpn_;
    Ipv4Address advertise_;
    Timestamp started_at_{};
    std::vector<std::string> warnings_;
    bool running_ = false;
};

nlohmann::json vpn_status_json(const VpnStatus& v);

/// First local IPv4 address inside `subnet`, if the host has one.
std::optional<Ipv4Address> find_local_address(const Cidr& subnet);

/// Configured advertise address, else the first local address in the subnet, else the
/// listen address, else loopback.
Ipv4Address resolve_advertise_address(const GatewayConfig& config);

/// Serves until SIGINT/SIGTERM. Returns one of the exit codes above.
int run_gateway(const GatewayConfig& config);

} // namespace gateway
