#include "gateway/store.hpp"

#include <map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <sqlite3.h>

namespace gateway {

std::string_view to_string(DiscoverySource s)
{
    return s == DiscoverySource::probe ? "probe" : "proxy_session";
}

void to_json(nlohmann::json& j, const ClientRecord& c)
{
    j = nlohmann::json{{"ip", c.ip.to_string()},
                       {"identifier", c.identifier},
                       {"first_seen", format_timestamp(c.first_seen)},
                       {"last_seen", format_timestamp(c.last_seen)},
                       {"online", c.online},
                       {"discovery_source", to_string(c.discovery_source)}};
}

void to_json(nlohmann::json& j, const SessionRecord& s)
{
    j = nlohmann::json{{"session_id", s.session_id},
                       {"client_ip", s.client_ip.to_string()},
                       {"protocol", to_string(s.protocol)},
                       {"target", s.target ? nlohmann::json(s.target->to_string()) : nlohmann::json()},
                       {"verdict", to_string(s.verdict.verdict)},
                       {"detail", s.verdict.detail},
                       {"started_at", format_timestamp(s.started_at)},
                       {"ended_at", s.ended_at ? nlohmann::json(format_timestamp(*s.ended_at)) : nlohmann::json()},
                       {"bytes_up", s.bytes_up},
                       {"bytes_down", s.bytes_down}};
}

namespace {

class Statement {
public:
    Statement(sqlite3* db, const char* sql)
    {
        if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK)
            throw StoreError(fmt::format("prepare failed: {}", sqlite3_errmsg(db)));
    }
    ~Statement() { sqlite3_finalize(stmt_); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    Statement& bind(int i, std::string_view s)
    {
        sqlite3_bind_text(stmt_, i, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT);
        return *this;
    }
    Statement& bind(int i, std::int64_t v)
    {
        sqlite3_bind_int64(stmt_, i, v);
        return *this;
    }
    Statement& bind_null(int i)
    {
        sqlite3_bind_null(stmt_, i);
        return *this;
    }

    bool step()
    {
        int rc = sqlite3_step(stmt_);
        if (rc == SQLITE_ROW)
            return true;
        if (rc == SQLITE_DONE)
            return false;
        throw StoreError(fmt::format("step failed: {}", sqlite3_errmsg(sqlite3_db_handle(stmt_))));
    }

    std::string text(int col) const
    {
        auto* p = sqlite3_column_text(stmt_, col);
        return p ? reinterpret_cast<const char*>(p) : "";
    }
    std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }
    bool is_null(int col) const { return sqlite3_column_type(stmt_, col) == SQLITE_NULL; }

private:
    sqlite3_stmt* stmt_ = nullptr;
};

} // namespace

SqliteStore::SqliteStore(const std::string& path) : path_(path)
{
    if (sqlite3_open_v2(path.c_str(), &db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_FULLMUTEX,
                        nullptr) != SQLITE_OK) {
        std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
        sqlite3_close(db_);
        db_ = nullptr;
        throw StoreError(fmt::format("cannot open store '{}': {}", path, msg));
    }
    sqlite3_busy_timeout(db_, 5000);
    try {
        std::int64_t found = 0;
        {
            Statement version(db_, "PRAGMA user_version");
            version.step();
            found = version.integer(0);
        }
        if (found > kSchemaVersion)
            throw StoreError(fmt::format("store '{}' has schema version {}, newer than supported version {}", path,
                                         found, kSchemaVersion));
        exec("PRAGMA journal_mode=WAL");
        exec("PRAGMA synchronous=NORMAL");
        exec("CREATE TABLE IF NOT EXISTS clients ("
             " ip TEXT PRIMARY KEY,"
             " identifier TEXT NOT NULL,"
             " first_seen INTEGER NOT NULL)");
        exec("CREATE TABLE IF NOT EXISTS sessions ("
             " session_id TEXT PRIMARY KEY,"
             " client_ip TEXT NOT NULL,"
             " protocol TEXT NOT NULL,"
             " target_host TEXT,"
             " target_port INTEGER,"
             " verdict TEXT NOT NULL,"
             " detail TEXT NOT NULL,"
             " started_at INTEGER NOT NULL,"
             " ended_at INTEGER,"
             " bytes_up INTEGER NOT NULL,"
             " bytes_down INTEGER NOT NULL)");
        exec("CREATE INDEX IF NOT EXISTS sessions_by_client ON sessions(client_ip)");
        if (found < kSchemaVersion)
            exec(fmt::format("PRAGMA user_version = {}", kSchemaVersion).c_str());
    } catch (const StoreError& e) {
        sqlite3_close(db_);
        db_ = nullptr;
        throw StoreError(fmt::format("store '{}': {}", path, e.what()));
    }
}

SqliteStore::~SqliteStore()
{
    sqlite3_close(db_);
}

void SqliteStore::exec(const char* sql)
{
    char* err = nullptr;
    if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
        std::string msg = err ? err : "unknown error";
        sqlite3_free(err);
        throw StoreError(msg);
    }
}

void SqliteStore::put_client(const ClientRecord& client)
{
    std::lock_guard lock(mu_);
    Statement st(db_, "INSERT INTO clients(ip, identifier, first_seen) VALUES(?1, ?2, ?3) "
                      "ON CONFLICT(ip) DO UPDATE SET identifier = excluded.identifier");
    st.bind(1, client.ip.to_string()).bind(2, client.identifier).bind(3, to_unix_millis(client.first_seen));
    st.step();
}

void SqliteStore::put_session(const SessionRecord& s)
{
    std::lock_guard lock(mu_);
    Statement st(db_, "INSERT OR IGNORE INTO sessions(session_id, client_ip, protocol, target_host, target_port,"
                      " verdict, detail, started_at, ended_at, bytes_up, bytes_down)"
                      " VALUES(?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)");
    st.bind(1, s.session_id).bind(2, s.client_ip.to_string()).bind(3, to_string(s.protocol));
    if (s.target)
        st.bind(4, s.target->host).bind(5, std::int64_t{s.target->port});
    else
        st.bind_null(4).bind_null(5);
    st.bind(6, to_string(s.verdict.verdict)).bind(7, s.verdict.detail).bind(8, to_unix_millis(s.started_at));
    if (s.ended_at)
        st.bind(9, to_unix_millis(*s.ended_at));
    else
        st.bind_null(9);
    st.bind(10, static_cast<std::int64_t>(s.bytes_up)).bind(11, static_cast<std::int64_t>(s.bytes_down));
    st.step();
}

std::vector<SessionRecord> SqliteStore::load_sessions()
{
    std::lock_guard lock(mu_);
    Statement st(db_, "SELECT session_id, client_ip, protocol, target_host, target_port, verdict, detail,"
                      " started_at, ended_at, bytes_up, bytes_down FROM sessions ORDER BY started_at, session_id");
    std::vector<SessionRecord> out;
    while (st.step()) {
        SessionRecord r;
        r.session_id = st.text(0);
        r.client_ip = Ipv4Address::parse(st.text(1)).value_or(Ipv4Address{});
        r.protocol = parse_protocol(st.text(2)).value_or(ProxyProtocol::http_connect);
        if (!st.is_null(3))
            r.target = TargetAddress{st.text(3), static_cast<std::uint16_t>(st.integer(4))};
        r.verdict.verdict = parse_verdict(st.text(5)).value_or(Verdict::allow);
        r.verdict.detail = st.text(6);
        r.started_at = from_unix_millis(st.integer(7));
        if (!st.is_null(8))
            r.ended_at = from_unix_millis(st.integer(8));
        r.bytes_up = static_cast<std::uint64_t>(st.integer(9));
        r.bytes_down = static_cast<std::uint64_t>(st.integer(10));
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<ClientRecord> SqliteStore::load_clients()
{
    std::lock_guard lock(mu_);
    Statement st(db_, "SELECT ip, identifier, first_seen FROM clients ORDER BY first_seen, ip");
    std::vector<ClientRecord> out;
    while (st.step()) {
        ClientRecord c;
        c.ip = Ipv4Address::parse(st.text(0)).value_or(Ipv4Address{});
        c.identifier = st.text(1);
        c.first_seen = c.last_seen = from_unix_millis(st.integer(2));
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<StoredClientTotals> aggregate_store(SessionStore& store)
{
    std::map<std::string, StoredClientTotals> by_ip;
    for (const auto& c : store.load_clients()) {
        auto& t = by_ip[c.ip.to_string()];
        t.ip = c.ip.to_string();
        t.identifier = c.identifier;
    }
    for (const auto& s : store.load_sessions()) {
        auto& t = by_ip[s.client_ip.to_string()];
        t.ip = s.client_ip.to_string();
        t.bytes_up += s.bytes_up;
        t.bytes_down += s.bytes_down;
        ++t.session_count;
    }
    std::vector<StoredClientTotals> out;
    for (auto& [_, t] : by_ip)
        out.push_back(std::move(t));
    return out;
}

} // namespace gateway
