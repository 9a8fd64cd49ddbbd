#pragma once

#include "gateway/anomaly.hpp"
#include "gateway/common.hpp"
#include "gateway/filter.hpp"
#include "gateway/quota.hpp"
#include "gateway/vpn.hpp"

#include <string>

namespace gateway {

/// Daemon configuration. See docs/config.md for the file format.
struct GatewayConfig {
    Ipv4Address listen_address{0, 0, 0, 0};
    std::uint16_t http_port = 8080;
    std::uint16_t socks_port = 1080;
    std::uint16_t control_port = 9090;
    std::optional<Credentials> auth;
    EgressSelector egress;
    Cidr subnet{Ipv4Address{192, 168, 43, 0}, 24};
    Millis probe_interval{10'000};
    QuotaPolicy quota_policy;
    FilterRuleSet filter_rules;
    std::string presets_file;
    AnomalySettings anomaly;
    Millis perf_sample_interval{5'000};
    Millis perf_retention{24 * 3'600'000};
    std::string store_path = "gateway.db";
    Millis session_idle_timeout{60'000};
    Millis connect_timeout{10'000};
    /// LAN address advertised in PAC/QR/help. Defaults to the first local address inside `subnet`.
    std::optional<Ipv4Address> advertise_address;
    /// Accept 127.0.0.0/8 clients in addition to `subnet` (local testing).
    bool allow_loopback_clients = false;
    bool probe_enabled = true;
    std::string dashboard_dir;

    friend bool operator==(const GatewayConfig&, const GatewayConfig&) = default;
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& message)
        : std::runtime_error(message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// Parses `key = value` lines (# comments), fills defaults and validates. Unknown keys,
/// malformed values and invariant violations throw ConfigError naming the key(s).
GatewayConfig parse_config(std::string_view text);
GatewayConfig load_config(const std::string& path);

/// Throws ConfigError on the first violated invariant.
void validate_config(const GatewayConfig& cfg);

/// Renders every key explicitly; parse_config(render_config(c)) == c.
std::string render_config(const GatewayConfig& cfg);

} // namespace gateway
