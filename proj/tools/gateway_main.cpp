#include "gateway/gateway.hpp"
#include "gateway/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <map>

using namespace gateway;

namespace {

std::optional<double> parse_rate(std::string text)
{
    double scale = 1;
    if (!text.empty()) {
        switch (text.back()) {
        case 'k': case 'K': scale = 1e3; break;
        case 'm': case 'M': scale = 1e6; break;
        case 'g': case 'G': scale = 1e9; break;
        default: break;
        }
        if (scale != 1)
            text.pop_back();
    }
    try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size() || !(v > 0))
            return std::nullopt;
        return v * scale;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

int cmd_check_config(const std::string& path)
{
    try {
        auto cfg = load_config(path);
        std::cout << "ok: " << path << "\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error (" << e.key() << "): " << e.what() << "\n";
        return kExitConfig;
    }
}

int cmd_detect_vpn(const std::string& config_path)
{
    EgressSelector egress;
    if (!config_path.empty()) {
        try {
            egress = load_config(config_path).egress;
        } catch (const ConfigError& e) {
            std::cerr << "config error (" << e.key() << "): " << e.what() << "\n";
            return kExitConfig;
        }
    }
    std::vector<std::string> warnings;
    auto status = detect_vpn(egress, system_clock().now(), &warnings);
    for (const auto& w : warnings)
        spdlog::warn("{}", w);
    std::cout << vpn_status_json(status).dump() << "\n";
    return kExitOk;
}

int cmd_stats(const std::string& config_path, std::string store_path)
{
    if (store_path.empty()) {
        try {
            store_path = load_config(config_path).store_path;
        } catch (const ConfigError& e) {
            std::cerr << "config error (" << e.key() << "): " << e.what() << "\n";
            return kExitConfig;
        }
    }
    try {
        SqliteStore store(store_path);
        nlohmann::json out = nlohmann::json::array();
        for (const auto& c : aggregate_store(store)) {
            out.push_back({{"ip", c.ip}, {"identifier", c.identifier}, {"bytes_up", c.bytes_up},
                           {"bytes_down", c.bytes_down}, {"session_count", c.session_count}});
        }
        std::cout << out.dump(2) << "\n";
    } catch (const StoreError& e) {
        std::cerr << "store error: " << e.what() << "\n";
        return kExitBindOrStore;
    }
    return kExitOk;
}

int cmd_provision(const std::string& config_path)
{
    GatewayConfig cfg;
    try {
        cfg = load_config(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error (" << e.key() << "): " << e.what() << "\n";
        return kExitConfig;
    }
    auto info = make_provisioning_info(resolve_advertise_address(cfg), cfg.http_port, cfg.socks_port,
                                       cfg.control_port, cfg.auth);
    std::cout << generate_qr_payload(info) << "\n";
    return kExitOk;
}

struct BenchArgs {
    int clients = 1;
    double down_s = 30;
    double up_s = 30;
    int reps = 5;
    std::string rate_limit;
    std::string json_out;
    std::string proxy;
    std::string protocol = "http_connect";
    std::string user;
    std::string pass;
    bool direct = false;
};

int cmd_bench(const BenchArgs& a)
{
    LoadTestPlan plan;
    plan.client_count = a.clients;
    plan.duration_down = Millis{static_cast<std::int64_t>(a.down_s * 1000)};
    plan.duration_up = Millis{static_cast<std::int64_t>(a.up_s * 1000)};
    plan.repetitions = a.reps;
    if (auto p = parse_protocol(a.protocol)) {
        plan.protocol = *p;
    } else {
        std::cerr << "unknown protocol '" << a.protocol << "'\n";
        return kExitConfig;
    }
    if (!a.rate_limit.empty()) {
        plan.link_rate_limit = parse_rate(a.rate_limit);
        if (!plan.link_rate_limit) {
            std::cerr << "bad --rate-limit '" << a.rate_limit << "' (bits/second, k/M/G suffix allowed)\n";
            return kExitConfig;
        }
    }
    if (!a.user.empty())
        plan.credentials = Credentials{a.user, a.pass};
    if (auto err = plan.validation_error(); !err.empty()) {
        std::cerr << err << "\n";
        return kExitConfig;
    }

    TestOrigin origin;
    std::unique_ptr<Gateway> embedded;
    std::optional<Endpoint> proxy;
    if (!a.direct) {
        if (!a.proxy.empty()) {
            auto ep = Endpoint::parse(a.proxy);
            if (!ep) {
                std::cerr << "bad --proxy '" << a.proxy << "' (host:port)\n";
                return kExitConfig;
            }
            proxy = *ep;
        } else {
            GatewayConfig cfg;
            cfg.listen_address = Ipv4Address{127, 0, 0, 1};
            cfg.allow_loopback_clients = true;
            cfg.probe_enabled = false;
            cfg.store_path = ":memory:";
            cfg.egress = EgressSelector::system_default();
            cfg.auth = plan.credentials;
            cfg.advertise_address = Ipv4Address{127, 0, 0, 1};
            // Loopback moves tens of GB per run; quota is not what is being measured.
            cfg.quota_policy.mode = QuotaMode::fixed;
            cfg.quota_policy.per_client_quota_bytes = std::uint64_t{1} << 60;
            GatewayOptions opts;
            opts.ephemeral_ports = true;
            opts.vpn_override = VpnStatus{};
            embedded = std::make_unique<Gateway>(cfg, opts);
            embedded->start();
            proxy = Endpoint{Ipv4Address{127, 0, 0, 1},
                             plan.protocol == ProxyProtocol::socks5 ? embedded->socks_port() : embedded->http_port()};
        }
    }

    LoadTestReport report;
    try {
        report = run_load_test(plan, proxy, origin.endpoint());
    } catch (const LoadTestError& e) {
        std::cerr << "bench failed: " << e.what() << "\n";
        return 1;
    }
    std::cout << report.to_table();
    for (const auto& d : report.diagnostics)
        std::cout << "discarded: " << d << "\n";

    if (embedded && report.diagnostics.empty()) {
        std::map<Ipv4Address, std::pair<std::uint64_t, std::uint64_t>> seen;
        for (const auto& rep : report.repetitions) {
            for (const auto& c : rep.clients) {
                seen[c.source].first += c.bytes_up;
                seen[c.source].second += c.bytes_down;
            }
        }
        embedded->stop(Millis{1000});
        int mismatches = 0;
        for (const auto& [ip, bytes] : seen) {
            auto st = embedded->meter().get_client_stats(ip.to_string());
            if (st.bytes_up != bytes.first || st.bytes_down != bytes.second) {
                ++mismatches;
                std::cout << fmt::format("meter mismatch {}: harness {}/{} meter {}/{}\n", ip.to_string(),
                                         bytes.first, bytes.second, st.bytes_up, st.bytes_down);
            }
        }
        std::cout << "meter cross-check: " << (mismatches == 0 ? "exact" : "MISMATCH") << "\n";
    }

    if (!a.json_out.empty()) {
        std::ofstream out(a.json_out);
        out << report.to_json().dump(2) << "\n";
        if (!out) {
            std::cerr << "cannot write " << a.json_out << "\n";
            return 1;
        }
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"LAN sharing gateway: HTTP/SOCKS5 proxy with per-client accounting"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace|debug|info|warn|error")->capture_default_str();

    std::string config_path;
    auto* run = app.add_subcommand("run", "serve until SIGINT/SIGTERM");
    run->add_option("-c,--config", config_path, "config file")->required();

    auto* check = app.add_subcommand("check-config", "validate a config file and exit");
    check->add_option("-c,--config", config_path, "config file")->required();

    auto* vpn = app.add_subcommand("detect-vpn", "print the VPN status as JSON");
    vpn->add_option("-c,--config", config_path, "config file (for the egress selector)");

    app.add_subcommand("version", "print the version");

    std::string store_path;
    bool stats_json = false;
    auto* stats = app.add_subcommand("stats", "dump per-client totals from the store");
    stats->add_flag("--json", stats_json, "JSON output (the only format)");
    auto* stats_src = stats->add_option_group("source");
    stats_src->add_option("-c,--config", config_path, "config file (uses its store_path)");
    stats_src->add_option("--store", store_path, "store file");
    stats_src->require_option(1);

    bool qr_text = false;
    auto* provision = app.add_subcommand("provision", "print client provisioning data");
    provision->add_option("-c,--config", config_path, "config file")->required();
    provision->add_flag("--qr-text", qr_text, "print the QR payload string")->required();

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "multi-client throughput/latency/fairness run");
    bench->add_option("--clients", bench_args.clients, "concurrent clients (1-16)")->capture_default_str();
    bench->add_option("--down", bench_args.down_s, "download phase seconds")->capture_default_str();
    bench->add_option("--up", bench_args.up_s, "upload phase seconds")->capture_default_str();
    bench->add_option("--reps", bench_args.reps, "repetitions")->capture_default_str();
    bench->add_option("--rate-limit", bench_args.rate_limit, "shared link cap in bits/second (k/M/G)");
    bench->add_option("--json", bench_args.json_out, "write the report here");
    bench->add_option("--proxy", bench_args.proxy, "external gateway host:port (default: embedded)");
    bench->add_option("--protocol", bench_args.protocol, "http_connect|socks5")->capture_default_str();
    bench->add_option("--user", bench_args.user, "proxy username");
    bench->add_option("--pass", bench_args.pass, "proxy password");
    bench->add_flag("--direct", bench_args.direct, "no proxy: baseline against the origin");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    if (*run) {
        GatewayConfig cfg;
        try {
            cfg = load_config(config_path);
        } catch (const ConfigError& e) {
            spdlog::error("config error ({}): {}", e.key(), e.what());
            return kExitConfig;
        }
        return run_gateway(cfg);
    }
    if (*check)
        return cmd_check_config(config_path);
    if (*vpn)
        return cmd_detect_vpn(config_path);
    if (app.got_subcommand("version")) {
        std::cout << "gateway " << GATEWAY_VERSION << "\n";
        return kExitOk;
    }
    if (*stats)
        return cmd_stats(config_path, store_path);
    if (*provision)
        return cmd_provision(config_path);
    if (*bench) {
        try {
            return cmd_bench(bench_args);
        } catch (const BindError& e) {
            std::cerr << "bind error: " << e.what() << "\n";
            return kExitBindOrStore;
        }
    }
    return kExitOk;
}
