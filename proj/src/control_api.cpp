#include "gateway/control_api.hpp"

#include "gateway/http_message.hpp"
#include "gateway/net.hpp"

#include <filesystem>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

namespace gateway {

namespace {

using nlohmann::json;

void reply_json(httplib::Response& res, const json& body, int status = 200)
{
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message, json extra = json::object())
{
    extra["error"] = message;
    reply_json(res, extra, status);
}

std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res)
{
    try {
        return json::parse(req.body.empty() ? std::string("{}") : req.body);
    } catch (const json::parse_error& e) {
        reply_error(res, 400, fmt::format("invalid JSON: {}", e.what()));
        return std::nullopt;
    }
}

std::string sse_frame(const ApiEvent& ev)
{
    return fmt::format("id: {}\nevent: {}\ndata: {}\n\n", ev.seq, to_string(ev.type), ev.to_json().dump());
}

constexpr const char* kPlaceholder = R"(<!DOCTYPE html>
<html lang="en"><head><meta charset="utf-8"><title>VPN gateway</title></head>
<body>
<h1>VPN gateway</h1>
<p>No dashboard is installed. The JSON API is under <a href="/api/status">/api/status</a>;
client setup instructions are at <a href="/help">/help</a>.</p>
</body></html>
)";

} // namespace

ControlApi::ControlApi(ControlContext ctx) : ctx_(std::move(ctx)) {}

ControlApi::~ControlApi()
{
    stop();
}

void ControlApi::install_routes(httplib::Server& server)
{
    const auto& ctx = ctx_;

    server.set_pre_routing_handler([&ctx](const httplib::Request& req, httplib::Response& res) {
        if (!ctx.auth)
            return httplib::Server::HandlerResponse::Unhandled;
        if (req.path == "/help" || req.path == "/proxy.pac")
            return httplib::Server::HandlerResponse::Unhandled;
        auto peer = Ipv4Address::parse(req.remote_addr);
        if (peer && peer->is_loopback())
            return httplib::Server::HandlerResponse::Unhandled;
        std::optional<Credentials> presented;
        if (req.has_header("Authorization"))
            presented = http::parse_basic_credentials(req.get_header_value("Authorization"));
        if (presented && *presented == *ctx.auth)
            return httplib::Server::HandlerResponse::Unhandled;
        res.status = 401;
        res.set_header("WWW-Authenticate", "Basic realm=\"gateway\"");
        res.set_content("authentication required\n", "text/plain");
        return httplib::Server::HandlerResponse::Handled;
    });

    server.Get("/api/clients", [&ctx](const httplib::Request&, httplib::Response& res) {
        auto snap = ctx.meter->snapshot();
        auto allocations = ctx.manager->allocations();
        const auto now = ctx.clock->now();
        json clients = json::array();
        for (const auto& c : snap.clients) {
            json row = c.record;
            row["bytes_up"] = c.stats.bytes_up;
            row["bytes_down"] = c.stats.bytes_down;
            row["session_count"] = c.stats.session_count;
            row["live_sessions"] = c.stats.live_sessions;
            std::optional<ClientAllocation> a;
            if (auto it = allocations.find(c.record.ip); it != allocations.end())
                a = it->second;
            else
                a = ctx.manager->allocation(c.record.ip);
            row["allocated_bytes"] = a ? a->allocated_bytes : 0;
            row["used_bytes"] = a ? a->used_bytes : 0;
            const bool blocked = a && a->blocked_until && *a->blocked_until > now;
            row["blocked"] = blocked;
            row["blocked_until"] = blocked ? json(format_timestamp(*a->blocked_until)) : json();
            clients.push_back(std::move(row));
        }
        reply_json(res, {{"timestamp", format_timestamp(snap.at)},
                         {"totals", {{"bytes_up", snap.totals.bytes_up}, {"bytes_down", snap.totals.bytes_down}}},
                         {"live_sessions", snap.live_sessions},
                         {"clients", std::move(clients)}});
    });

    server.Get("/api/sessions", [&ctx](const httplib::Request& req, httplib::Response& res) {
        std::optional<Ipv4Address> ip;
        if (req.has_param("client")) {
            auto c = ctx.meter->find_client(req.get_param_value("client"));
            if (!c)
                return reply_error(res, 404, fmt::format("unknown client {}", req.get_param_value("client")));
            ip = c->ip;
        }
        std::size_t limit = 500;
        if (req.has_param("limit")) {
            try {
                limit = std::stoul(req.get_param_value("limit"));
            } catch (const std::exception&) {
                return reply_error(res, 400, "limit: must be a non-negative integer");
            }
        }
        auto sessions = ctx.meter->sessions(ip);
        std::sort(sessions.begin(), sessions.end(),
                  [](const SessionRecord& a, const SessionRecord& b) { return a.started_at > b.started_at; });
        if (sessions.size() > limit)
            sessions.resize(limit);
        reply_json(res, {{"sessions", sessions}});
    });

    server.Get("/api/perf", [&ctx](const httplib::Request& req, httplib::Response& res) {
        Millis window{60'000};
        if (req.has_param("window")) {
            auto w = parse_duration(req.get_param_value("window"));
            if (!w || w->count() <= 0)
                return reply_error(res, 400, "window: expected a duration such as 60s or 5m");
            window = *w;
        }
        const auto now = ctx.clock->now();
        auto samples = ctx.perf->samples_between(now - window, now);
        reply_json(res, {{"window_ms", window.count()}, {"samples", samples}});
    });

    server.Get("/api/status", [&ctx](const httplib::Request&, httplib::Response& res) {
        json body = ctx.status ? ctx.status() : json::object();
        if (ctx.provisioning) {
            auto info = ctx.provisioning();
            body["provisioning"] = {{"qr_payload", generate_qr_payload(info)},
                                    {"pac_url", info.pac_url},
                                    {"help_url", info.help_url}};
        }
        reply_json(res, body);
    });

    server.Get("/api/quota", [&ctx](const httplib::Request&, httplib::Response& res) {
        reply_json(res, ctx.manager->policy());
    });

    server.Put("/api/quota", [&ctx](const httplib::Request& req, httplib::Response& res) {
        auto body = parse_body(req, res);
        if (!body)
            return;
        try {
            auto applied = ctx.manager->put_quota_policy(quota_policy_from_json(*body));
            spdlog::info("quota policy replaced via control API");
            reply_json(res, applied);
        } catch (const std::invalid_argument& e) {
            std::string msg = e.what();
            auto colon = msg.find(':');
            reply_error(res, 400, msg, {{"field", colon == std::string::npos ? "" : msg.substr(0, colon)}});
        }
    });

    server.Get("/api/filters", [&ctx](const httplib::Request&, httplib::Response& res) {
        reply_json(res, *ctx.manager->rules());
    });

    server.Put("/api/filters", [&ctx](const httplib::Request& req, httplib::Response& res) {
        auto body = parse_body(req, res);
        if (!body)
            return;
        try {
            auto rules = rules_from_json(*body, ctx.manager->rules()->presets);
            ctx.manager->put_filter_rules(rules);
            spdlog::info("filter rules replaced via control API");
            reply_json(res, rules);
        } catch (const FilterError& e) {
            reply_error(res, 400, e.what(), {{"entry", e.entry()}});
        } catch (const json::exception& e) {
            reply_error(res, 400, e.what());
        }
    });

    server.Post(R"(/api/clients/([^/]+)/disconnect)", [&ctx](const httplib::Request& req, httplib::Response& res) {
        auto ip = Ipv4Address::parse(req.matches[1].str());
        if (!ip) {
            auto c = ctx.meter->find_client(req.matches[1].str());
            if (!c)
                return reply_error(res, 404, fmt::format("unknown client {}", req.matches[1].str()));
            ip = c->ip;
        }
        auto body = parse_body(req, res);
        if (!body)
            return;
        std::string reason = body->value("reason", "");
        try {
            auto n = ctx.manager->disconnect_client(*ip, reason);
            auto a = ctx.manager->allocation(*ip);
            reply_json(res, {{"client_ip", ip->to_string()},
                             {"terminated_sessions", n},
                             {"blocked_until", a && a->blocked_until ? json(format_timestamp(*a->blocked_until))
                                                                     : json()}});
        } catch (const NotFound& e) {
            reply_error(res, 404, e.what());
        }
    });

    server.Get("/api/events", [this, &ctx](const httplib::Request& req, httplib::Response& res) {
        std::uint64_t since = ctx.events->last_seq();
        std::string since_text;
        if (req.has_param("since"))
            since_text = req.get_param_value("since");
        else if (req.has_header("Last-Event-ID"))
            since_text = req.get_header_value("Last-Event-ID");
        if (!since_text.empty()) {
            try {
                since = std::stoull(since_text);
            } catch (const std::exception&) {
                return reply_error(res, 400, "since: must be a sequence number");
            }
        }
        res.set_header("Cache-Control", "no-cache");
        auto cursor = std::make_shared<std::uint64_t>(since);
        res.set_chunked_content_provider(
            "text/event-stream", [this, &ctx, cursor](std::size_t, httplib::DataSink& sink) {
                const auto step = std::min(ctx.keepalive, Millis{500});
                auto waited = Millis::zero();
                for (;;) {
                    if (stopping_ || !sink.is_writable())
                        return false;
                    auto r = ctx.events->read_after(*cursor, step);
                    if (r.overflow) {
                        auto notice = json{{"type", "overflow"},
                                           {"since", *cursor},
                                           {"detail", "consumer fell behind the event buffer; reconnect"}};
                        auto frame = fmt::format("event: overflow\ndata: {}\n\n", notice.dump());
                        sink.write(frame.data(), frame.size());
                        sink.done();
                        return false;
                    }
                    if (!r.events.empty()) {
                        std::string frames;
                        for (const auto& ev : r.events)
                            frames += sse_frame(ev);
                        *cursor = r.events.back().seq;
                        return sink.write(frames.data(), frames.size());
                    }
                    if (r.closed) {
                        sink.done();
                        return false;
                    }
                    waited += step;
                    if (waited >= ctx.keepalive) {
                        static constexpr std::string_view ka = ": keepalive\n\n";
                        return sink.write(ka.data(), ka.size());
                    }
                }
            });
    });

    server.Get("/help", [&ctx](const httplib::Request&, httplib::Response& res) {
        res.set_content(render_help_page(ctx.provisioning()), "text/html; charset=utf-8");
    });

    server.Get("/proxy.pac", [&ctx](const httplib::Request&, httplib::Response& res) {
        res.set_content(generate_pac(ctx.provisioning(), ctx.lan), "application/x-ns-proxy-autoconfig");
    });

    if (!ctx.dashboard_dir.empty() && std::filesystem::is_directory(ctx.dashboard_dir)) {
        server.set_mount_point("/", ctx.dashboard_dir);
    } else {
        server.Get("/", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(kPlaceholder, "text/html; charset=utf-8");
        });
    }
}

void ControlApi::start(const std::vector<Ipv4Address>& addresses, std::uint16_t port)
{
    if (!ctx_.meter || !ctx_.manager || !ctx_.perf || !ctx_.events || !ctx_.provisioning)
        throw std::invalid_argument("control API context is incomplete");
    stopping_ = false;
    port_ = port;
    for (auto addr : addresses) {
        auto server = std::make_unique<httplib::Server>();
        server->new_task_queue = [] { return new httplib::ThreadPool(16); };
        install_routes(*server);
        if (port_ == 0) {
            int p = server->bind_to_any_port(addr.to_string());
            if (p <= 0)
                throw BindError(addr, 0, "control listener bind failed");
            port_ = static_cast<std::uint16_t>(p);
        } else if (!server->bind_to_port(addr.to_string(), port_)) {
            throw BindError(addr, port_, "control listener bind failed");
        }
        servers_.push_back(std::move(server));
    }
    for (auto& s : servers_) {
        auto* raw = s.get();
        threads_.emplace_back([raw] { raw->listen_after_bind(); });
    }
    std::vector<std::string> names;
    for (auto a : addresses)
        names.push_back(a.to_string());
    spdlog::info("control API listening on {} port {}", fmt::join(names, ", "), port_);
}

void ControlApi::stop()
{
    stopping_ = true;
    for (auto& s : servers_)
        s->stop();
    for (auto& t : threads_) {
        if (t.joinable())
            t.join();
    }
    threads_.clear();
    servers_.clear();
}

} // namespace gateway
