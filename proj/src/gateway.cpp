#include "gateway/gateway.hpp"

#include "gateway/discovery.hpp"

#include <csignal>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace gateway {

nlohmann::json vpn_status_json(const VpnStatus& v)
{
    return {{"active", v.active},
            {"interface_name", v.interface_name ? nlohmann::json(*v.interface_name) : nlohmann::json()},
            {"detected_at", format_timestamp(v.detected_at)}};
}

std::optional<Ipv4Address> find_local_address(const Cidr& subnet)
{
    try {
        for (const auto& iface : list_interfaces()) {
            if (!iface.up)
                continue;
            for (auto a : iface.addresses) {
                if (subnet.contains(a))
                    return a;
            }
        }
    } catch (const NetError& e) {
        spdlog::warn("interface enumeration failed: {}", e.what());
    }
    return std::nullopt;
}

Ipv4Address resolve_advertise_address(const GatewayConfig& config)
{
    if (config.advertise_address)
        return *config.advertise_address;
    if (auto local = find_local_address(config.subnet))
        return *local;
    if (!config.listen_address.is_any())
        return config.listen_address;
    return Ipv4Address{127, 0, 0, 1};
}

Gateway::Gateway(GatewayConfig config, GatewayOptions options)
    : config_(std::move(config)), clock_(options.clock ? *options.clock : system_clock()),
      prober_(std::move(options.prober))
{
    validate_config(config_);
    if (options.ephemeral_ports)
        config_.http_port = config_.socks_port = config_.control_port = 0;
    store_ = std::make_unique<SqliteStore>(config_.store_path);

    MeterOptions mo;
    mo.subnet = config_.subnet;
    mo.allow_loopback = config_.allow_loopback_clients;
    mo.probe_interval = config_.probe_interval;
    meter_ = std::make_unique<TrafficMeter>(mo, clock_, store_.get(), &events_);
    auto clients = store_->load_clients();
    auto sessions = store_->load_sessions();
    meter_->restore(clients, sessions);
    if (!sessions.empty())
        spdlog::info("restored {} clients and {} sessions from {}", clients.size(), sessions.size(), store_->path());

    manager_ = std::make_unique<TrafficManager>(config_.quota_policy, config_.filter_rules, config_.anomaly, clock_,
                                                &events_);
    manager_->attach(*meter_);

    if (options.vpn_override) {
        vpn_ = *options.vpn_override;
        vpn_fixed_ = true;
    } else {
        vpn_ = detect_vpn(config_.egress, clock_.now(), &warnings_);
    }
    if (!vpn_.active && config_.egress.mode == EgressMode::auto_detect)
        warnings_.push_back("no VPN tunnel detected; upstream connections use the system default route");
    auto binding = resolve_egress(config_.egress, vpn_);
    for (const auto& w : warnings_)
        spdlog::warn("{}", w);
    spdlog::info("egress: {}", binding.describe());
    dialer_ = std::make_unique<EgressDialer>(binding);

    ProxySettings ps;
    ps.auth = config_.auth;
    ps.connect_timeout = config_.connect_timeout;
    ps.idle_timeout = config_.session_idle_timeout;
    proxy_ = std::make_unique<ProxyServer>(ps, *meter_, *manager_, *dialer_, clock_);

    PerfSources sources;
    sources.process_cpu_time = read_process_cpu_time;
    sources.battery_level = [] { return read_battery_level(); };
    sources.active_connections = [this] { return static_cast<std::uint64_t>(meter_->live_session_count()); };
    sources.byte_totals = [this] {
        auto t = meter_->totals();
        return std::pair{t.bytes_up, t.bytes_down};
    };
    const auto retention = static_cast<std::size_t>(config_.perf_retention / config_.perf_sample_interval) + 1;
    perf_ = std::make_unique<PerfSampler>(std::move(sources), retention);

    advertise_ = resolve_advertise_address(config_);

    ControlContext ctx;
    ctx.meter = meter_.get();
    ctx.manager = manager_.get();
    ctx.perf = perf_.get();
    ctx.events = &events_;
    ctx.clock = &clock_;
    ctx.status = [this] { return status(); };
    ctx.provisioning = [this] { return provisioning(); };
    ctx.lan = config_.subnet;
    ctx.auth = config_.auth;
    ctx.dashboard_dir = config_.dashboard_dir;
    control_ = std::make_unique<ControlApi>(std::move(ctx));
}

Gateway::~Gateway()
{
    stop(Millis{0});
}

void Gateway::start()
{
    proxy_->start(config_.listen_address, config_.http_port, config_.socks_port);
    std::vector<Ipv4Address> control_addrs{Ipv4Address{127, 0, 0, 1}};
    if (!advertise_.is_loopback())
        control_addrs.push_back(advertise_);
    try {
        control_->start(control_addrs, config_.control_port);
    } catch (...) {
        proxy_->stop(Millis{0});
        throw;
    }
    started_at_ = clock_.now();
    running_ = true;

    if (config_.probe_enabled) {
        if (!prober_)
            prober_ = make_default_prober();
        discovery_task_.start(config_.probe_interval, [this] {
            try {
                meter_->discover_clients(*prober_);
            } catch (const std::exception& e) {
                spdlog::warn("discovery round failed: {}", e.what());
            }
        });
    }
    perf_task_.start(config_.perf_sample_interval, [this] {
        auto s = perf_->sample(clock_.now());
        nlohmann::json payload = s;
        events_.publish(EventType::perf_sample, std::move(payload));
    });
    tick_task_.start(Millis{1000}, [this] {
        manager_->tick(clock_.now());
        meter_->flush_pending();
    });
    if (!vpn_fixed_)
        vpn_task_.start(Millis{5000}, [this] { refresh_vpn(); });

    spdlog::info("gateway up: http {} socks5 {} control {} (advertised as {})", http_port(), socks_port(),
                 control_port(), advertise_.to_string());
}

void Gateway::refresh_vpn()
{
    auto next = detect_vpn(config_.egress, clock_.now());
    std::lock_guard lock(vpn_mu_);
    if (next.active != vpn_.active || next.interface_name != vpn_.interface_name) {
        // Live sessions keep the egress they were dialed on; only the reported status changes.
        spdlog::warn("VPN status changed: {} -> {}", vpn_.active ? vpn_.interface_name.value_or("?") : "inactive",
                     next.active ? next.interface_name.value_or("?") : "inactive");
    }
    vpn_ = next;
}

void Gateway::stop(Millis drain)
{
    if (!running_)
        return;
    running_ = false;
    spdlog::info("shutting down (drain {} ms)", drain.count());
    proxy_->stop(drain);
    discovery_task_.stop();
    perf_task_.stop();
    tick_task_.stop();
    vpn_task_.stop();
    for (auto& s : meter_->live_sessions())
        meter_->finalize_session(s);
    if (auto left = meter_->flush_pending(); left > 0)
        spdlog::error("{} finalized sessions could not be written to {}", left, store_->path());
    events_.close();
    control_->stop();
}

std::uint16_t Gateway::http_port() const
{
    return proxy_->http_port();
}

std::uint16_t Gateway::socks_port() const
{
    return proxy_->socks_port();
}

std::uint16_t Gateway::control_port() const
{
    return control_->port();
}

VpnStatus Gateway::vpn_status() const
{
    std::lock_guard lock(vpn_mu_);
    return vpn_;
}

ProvisioningInfo Gateway::provisioning() const
{
    return make_provisioning_info(advertise_, http_port(), socks_port(), control_port(), config_.auth);
}

nlohmann::json Gateway::status() const
{
    const auto now = clock_.now();
    auto totals = meter_->totals();
    auto binding = dialer_->binding();
    return {{"version", GATEWAY_VERSION},
            {"started_at", format_timestamp(started_at_)},
            {"uptime_s", std::chrono::duration_cast<std::chrono::seconds>(now - started_at_).count()},
            {"vpn", vpn_status_json(vpn_status())},
            {"egress", {{"mode", to_string(config_.egress.mode)}, {"value", config_.egress.value},
                        {"binding", binding.describe()}}},
            {"listen", {{"address", config_.listen_address.to_string()}, {"http_port", http_port()},
                        {"socks_port", socks_port()}, {"control_port", control_port()}}},
            {"advertise_address", advertise_.to_string()},
            {"subnet", config_.subnet.to_string()},
            {"auth_required", config_.auth.has_value()},
            {"live_sessions", meter_->live_session_count()},
            {"totals", {{"bytes_up", totals.bytes_up}, {"bytes_down", totals.bytes_down}}},
            {"warnings", warnings_}};
}

int run_gateway(const GatewayConfig& config)
{
    // Block before any thread exists so every thread inherits the mask and sigwait sees the signal.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    std::unique_ptr<Gateway> gw;
    try {
        gw = std::make_unique<Gateway>(config);
        gw->start();
    } catch (const ConfigError& e) {
        spdlog::error("config error ({}): {}", e.key(), e.what());
        return kExitConfig;
    } catch (const StoreError& e) {
        spdlog::error("store error: {}", e.what());
        return kExitBindOrStore;
    } catch (const BindError& e) {
        spdlog::error("cannot bind port {}: {}", e.port(), e.what());
        return kExitBindOrStore;
    }

    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("received {}", sig == SIGINT ? "SIGINT" : "SIGTERM");
    gw->stop(Millis{5000});
    return kExitOk;
}

} // namespace gateway
