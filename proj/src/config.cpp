#include "gateway/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace gateway {

namespace {

using Setter = std::function<void(GatewayConfig&, const std::string&)>;

[[noreturn]] void bad_value(const std::string& key, const std::string& value, std::string_view expected)
{
    throw ConfigError(key, fmt::format("{}: invalid value '{}' (expected {})", key, value, expected));
}

std::uint16_t port_value(const std::string& key, const std::string& v)
{
    unsigned n = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (ec != std::errc{} || ptr != v.data() + v.size() || n < 1 || n > 65535)
        bad_value(key, v, "a TCP port 1-65535");
    return static_cast<std::uint16_t>(n);
}

Millis duration_value(const std::string& key, const std::string& v)
{
    auto d = parse_duration(v);
    if (!d)
        bad_value(key, v, "a duration such as 10s, 500ms, 5m");
    return *d;
}

std::uint64_t bytes_value(const std::string& key, const std::string& v)
{
    auto b = parse_byte_count(v);
    if (!b)
        bad_value(key, v, "a byte count such as 300MB");
    return *b;
}

Ipv4Address address_value(const std::string& key, const std::string& v)
{
    auto a = Ipv4Address::parse(v);
    if (!a)
        bad_value(key, v, "an IPv4 address");
    return *a;
}

bool bool_value(const std::string& key, const std::string& v)
{
    auto l = to_lower(v);
    if (l == "true" || l == "yes" || l == "1")
        return true;
    if (l == "false" || l == "no" || l == "0")
        return false;
    bad_value(key, v, "true or false");
}

double real_value(const std::string& key, const std::string& v)
{
    double d = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        bad_value(key, v, "a number");
    return d;
}

Credentials& auth_of(GatewayConfig& c)
{
    if (!c.auth)
        c.auth.emplace();
    return *c.auth;
}

const std::map<std::string, Setter, std::less<>>& setters()
{
    static const std::map<std::string, Setter, std::less<>> table = {
        {"listen_address", [](GatewayConfig& c, const std::string& v) { c.listen_address = address_value("listen_address", v); }},
        {"http_port", [](GatewayConfig& c, const std::string& v) { c.http_port = port_value("http_port", v); }},
        {"socks_port", [](GatewayConfig& c, const std::string& v) { c.socks_port = port_value("socks_port", v); }},
        {"control_port", [](GatewayConfig& c, const std::string& v) { c.control_port = port_value("control_port", v); }},
        {"auth.username", [](GatewayConfig& c, const std::string& v) { auth_of(c).username = v; }},
        {"auth.password", [](GatewayConfig& c, const std::string& v) { auth_of(c).password = v; }},
        {"egress.mode",
         [](GatewayConfig& c, const std::string& v) {
             auto m = parse_egress_mode(v);
             if (!m)
                 bad_value("egress.mode", v, "auto_detect, named_interface, bind_address or system_default");
             c.egress.mode = *m;
         }},
        {"egress.value", [](GatewayConfig& c, const std::string& v) { c.egress.value = v; }},
        {"subnet",
         [](GatewayConfig& c, const std::string& v) {
             auto s = Cidr::parse(v);
             if (!s)
                 bad_value("subnet", v, "an IPv4 CIDR block such as 192.168.43.0/24");
             c.subnet = *s;
         }},
        {"probe_interval", [](GatewayConfig& c, const std::string& v) { c.probe_interval = duration_value("probe_interval", v); }},
        {"probe_enabled", [](GatewayConfig& c, const std::string& v) { c.probe_enabled = bool_value("probe_enabled", v); }},
        {"quota.mode",
         [](GatewayConfig& c, const std::string& v) {
             auto m = parse_quota_mode(v);
             if (!m)
                 bad_value("quota.mode", v, "dynamic or fixed");
             c.quota_policy.mode = *m;
         }},
        {"quota.total_bytes", [](GatewayConfig& c, const std::string& v) { c.quota_policy.total_quota_bytes = bytes_value("quota.total_bytes", v); }},
        {"quota.per_client_bytes", [](GatewayConfig& c, const std::string& v) { c.quota_policy.per_client_quota_bytes = bytes_value("quota.per_client_bytes", v); }},
        {"quota.cooldown", [](GatewayConfig& c, const std::string& v) { c.quota_policy.cooldown = duration_value("quota.cooldown", v); }},
        {"filter.blocked_domains",
         [](GatewayConfig& c, const std::string& v) {
             for (const auto& d : split_list(v)) {
                 auto n = normalize_domain(d);
                 if (!n)
                     throw ConfigError("filter.blocked_domains", fmt::format("filter.blocked_domains: invalid domain '{}'", d));
                 c.filter_rules.blocked_domains.insert(*n);
             }
         }},
        {"filter.blocked_ports",
         [](GatewayConfig& c, const std::string& v) {
             for (const auto& p : split_list(v))
                 c.filter_rules.blocked_ports.insert(port_value("filter.blocked_ports", p));
         }},
        {"filter.presets_file", [](GatewayConfig& c, const std::string& v) { c.presets_file = v; }},
        {"filter.enabled_presets",
         [](GatewayConfig& c, const std::string& v) {
             for (const auto& p : split_list(v))
                 c.filter_rules.enabled_presets.insert(p);
         }},
        {"anomaly.multiplier", [](GatewayConfig& c, const std::string& v) { c.anomaly.multiplier = real_value("anomaly.multiplier", v); }},
        {"anomaly.window", [](GatewayConfig& c, const std::string& v) { c.anomaly.window = duration_value("anomaly.window", v); }},
        {"anomaly.debounce", [](GatewayConfig& c, const std::string& v) { c.anomaly.debounce = duration_value("anomaly.debounce", v); }},
        {"anomaly.min_sessions",
         [](GatewayConfig& c, const std::string& v) {
             c.anomaly.min_samples = static_cast<std::uint32_t>(bytes_value("anomaly.min_sessions", v));
         }},
        {"anomaly.baseline_weight", [](GatewayConfig& c, const std::string& v) { c.anomaly.baseline_weight = real_value("anomaly.baseline_weight", v); }},
        {"perf_sample_interval", [](GatewayConfig& c, const std::string& v) { c.perf_sample_interval = duration_value("perf_sample_interval", v); }},
        {"perf_retention", [](GatewayConfig& c, const std::string& v) { c.perf_retention = duration_value("perf_retention", v); }},
        {"store_path", [](GatewayConfig& c, const std::string& v) { c.store_path = v; }},
        {"session_idle_timeout", [](GatewayConfig& c, const std::string& v) { c.session_idle_timeout = duration_value("session_idle_timeout", v); }},
        {"connect_timeout", [](GatewayConfig& c, const std::string& v) { c.connect_timeout = duration_value("connect_timeout", v); }},
        {"advertise_address", [](GatewayConfig& c, const std::string& v) { c.advertise_address = address_value("advertise_address", v); }},
        {"allow_loopback_clients", [](GatewayConfig& c, const std::string& v) { c.allow_loopback_clients = bool_value("allow_loopback_clients", v); }},
        {"dashboard_dir", [](GatewayConfig& c, const std::string& v) { c.dashboard_dir = v; }},
    };
    return table;
}

std::string unquote(std::string_view v)
{
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
        return std::string(v.substr(1, v.size() - 2));
    return std::string(v);
}

} // namespace

void validate_config(const GatewayConfig& cfg)
{
    const std::pair<const char*, std::uint16_t> ports[] = {
        {"http_port", cfg.http_port}, {"socks_port", cfg.socks_port}, {"control_port", cfg.control_port}};
    for (std::size_t i = 0; i < 3; ++i) {
        if (ports[i].second == 0)
            throw ConfigError(ports[i].first, fmt::format("{}: must be in 1-65535", ports[i].first));
        for (std::size_t j = i + 1; j < 3; ++j) {
            if (ports[i].second == ports[j].second) {
                throw ConfigError(fmt::format("{},{}", ports[i].first, ports[j].first),
                                  fmt::format("{} and {} are both {}", ports[i].first, ports[j].first,
                                              ports[i].second));
            }
        }
    }
    if (cfg.auth) {
        if (cfg.auth->username.empty())
            throw ConfigError("auth.username", "auth.username: empty username");
        if (cfg.auth->password.empty())
            throw ConfigError("auth.password", "auth.password: empty password");
        if (cfg.auth->username.size() > 255 || cfg.auth->password.size() > 255)
            throw ConfigError("auth", "auth: username and password are limited to 255 bytes");
    }
    if (auto err = cfg.egress.validation_error(); !err.empty())
        throw ConfigError("egress.value", fmt::format("egress: {}", err));
    if (cfg.subnet.prefix() < 16)
        throw ConfigError("subnet", fmt::format("subnet: {} is too large to probe (prefix must be >= 16)",
                                                cfg.subnet.to_string()));
    if (cfg.probe_interval <= Millis::zero())
        throw ConfigError("probe_interval", "probe_interval: must be > 0");
    if (cfg.perf_sample_interval <= Millis::zero())
        throw ConfigError("perf_sample_interval", "perf_sample_interval: must be > 0");
    if (cfg.perf_retention < cfg.perf_sample_interval)
        throw ConfigError("perf_retention", "perf_retention: must be at least one sample interval");
    if (!(cfg.anomaly.multiplier > 1.0))
        throw ConfigError("anomaly.multiplier", "anomaly.multiplier: must be > 1");
    if (cfg.anomaly.window < Millis{1000})
        throw ConfigError("anomaly.window", "anomaly.window: must be >= 1s");
    if (!(cfg.anomaly.baseline_weight > 0.0 && cfg.anomaly.baseline_weight <= 1.0))
        throw ConfigError("anomaly.baseline_weight", "anomaly.baseline_weight: must be in (0, 1]");
    if (auto err = cfg.quota_policy.validation_error(); !err.empty()) {
        auto field = err.substr(0, err.find(':'));
        const char* key = field == "total_quota_bytes"        ? "quota.total_bytes"
                          : field == "per_client_quota_bytes" ? "quota.per_client_bytes"
                                                              : "quota.cooldown";
        throw ConfigError(key, fmt::format("{}: {}", key, err.substr(err.find(':') + 2)));
    }
    if (cfg.session_idle_timeout <= Millis::zero())
        throw ConfigError("session_idle_timeout", "session_idle_timeout: must be > 0");
    if (cfg.connect_timeout <= Millis::zero())
        throw ConfigError("connect_timeout", "connect_timeout: must be > 0");
    if (cfg.store_path.empty())
        throw ConfigError("store_path", "store_path: must not be empty");
    try {
        validate_rules(cfg.filter_rules);
    } catch (const FilterError& e) {
        const bool preset = cfg.filter_rules.enabled_presets.contains(e.entry()) ||
                            cfg.filter_rules.presets.contains(e.entry());
        const char* key = preset ? "filter.enabled_presets" : "filter.blocked_domains";
        throw ConfigError(key, fmt::format("{}: {}", key, e.what()));
    }
}

GatewayConfig parse_config(std::string_view text)
{
    GatewayConfig cfg;
    std::map<std::string, int, std::less<>> seen;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto body = trim(line);
        if (body.empty() || body.front() == '#')
            continue;
        auto eq = body.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError(fmt::format("line {}", lineno), fmt::format("line {}: expected 'key = value'", lineno));
        std::string key(trim(body.substr(0, eq)));
        std::string value = unquote(trim(body.substr(eq + 1)));
        auto it = setters().find(key);
        if (it == setters().end())
            throw ConfigError(key, fmt::format("line {}: unknown key '{}'", lineno, key));
        if (auto [pos, inserted] = seen.emplace(key, lineno); !inserted)
            throw ConfigError(key, fmt::format("line {}: duplicate key '{}' (first on line {})", lineno, key, pos->second));
        it->second(cfg, value);
    }

    if (!cfg.presets_file.empty()) {
        try {
            cfg.filter_rules.presets = load_presets_file(cfg.presets_file);
        } catch (const FilterError& e) {
            throw ConfigError("filter.presets_file", e.what());
        }
    }
    validate_config(cfg);
    return cfg;
}

GatewayConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("", fmt::format("cannot open config file '{}'", path));
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string render_config(const GatewayConfig& c)
{
    std::string out;
    auto put = [&](std::string_view key, const std::string& value) {
        out += fmt::format("{} = {}\n", key, value);
    };
    put("listen_address", c.listen_address.to_string());
    put("http_port", std::to_string(c.http_port));
    put("socks_port", std::to_string(c.socks_port));
    put("control_port", std::to_string(c.control_port));
    if (c.auth) {
        put("auth.username", c.auth->username);
        put("auth.password", c.auth->password);
    }
    put("egress.mode", std::string(to_string(c.egress.mode)));
    if (!c.egress.value.empty())
        put("egress.value", c.egress.value);
    put("subnet", c.subnet.to_string());
    put("probe_interval", format_duration(c.probe_interval));
    put("probe_enabled", c.probe_enabled ? "true" : "false");
    put("quota.mode", std::string(to_string(c.quota_policy.mode)));
    put("quota.total_bytes", std::to_string(c.quota_policy.total_quota_bytes));
    put("quota.per_client_bytes", std::to_string(c.quota_policy.per_client_quota_bytes));
    put("quota.cooldown", format_duration(c.quota_policy.cooldown));
    if (!c.filter_rules.blocked_domains.empty())
        put("filter.blocked_domains", fmt::format("{}", fmt::join(c.filter_rules.blocked_domains, ",")));
    if (!c.filter_rules.blocked_ports.empty())
        put("filter.blocked_ports", fmt::format("{}", fmt::join(c.filter_rules.blocked_ports, ",")));
    if (!c.presets_file.empty())
        put("filter.presets_file", c.presets_file);
    if (!c.filter_rules.enabled_presets.empty())
        put("filter.enabled_presets", fmt::format("{}", fmt::join(c.filter_rules.enabled_presets, ",")));
    put("anomaly.multiplier", fmt::format("{}", c.anomaly.multiplier));
    put("anomaly.window", format_duration(c.anomaly.window));
    put("anomaly.debounce", format_duration(c.anomaly.debounce));
    put("anomaly.min_sessions", std::to_string(c.anomaly.min_samples));
    put("anomaly.baseline_weight", fmt::format("{}", c.anomaly.baseline_weight));
    put("perf_sample_interval", format_duration(c.perf_sample_interval));
    put("perf_retention", format_duration(c.perf_retention));
    put("store_path", c.store_path);
    put("session_idle_timeout", format_duration(c.session_idle_timeout));
    put("connect_timeout", format_duration(c.connect_timeout));
    if (c.advertise_address)
        put("advertise_address", c.advertise_address->to_string());
    put("allow_loopback_clients", c.allow_loopback_clients ? "true" : "false");
    if (!c.dashboard_dir.empty())
        put("dashboard_dir", c.dashboard_dir);
    return out;
}

} // namespace gateway
