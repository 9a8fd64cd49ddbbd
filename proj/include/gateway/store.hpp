#pragma once

#include "gateway/records.hpp"

#include <mutex>
#include <string>
#include <vector>

struct sqlite3;

namespace gateway {

class StoreError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Durable sink for client identities and finalized sessions. Sessions are append-only;
/// writing a session_id that already exists is a no-op.
class SessionStore {
public:
    virtual ~SessionStore() = default;

    virtual void put_client(const ClientRecord& client) = 0;
    virtual void put_session(const SessionRecord& session) = 0;
    virtual std::vector<SessionRecord> load_sessions() = 0;
    virtual std::vector<ClientRecord> load_clients() = 0;
};

/// Single-file SQLite store. Schema version lives in PRAGMA user_version; opening a file
/// written by a newer schema fails.
class SqliteStore final : public SessionStore {
public:
    static constexpr int kSchemaVersion = 1;

    /// Throws StoreError naming the path when the file cannot be opened or migrated.
    explicit SqliteStore(const std::string& path);
    ~SqliteStore() override;

    SqliteStore(const SqliteStore&) = delete;
    SqliteStore& operator=(const SqliteStore&) = delete;

    void put_client(const ClientRecord& client) override;
    void put_session(const SessionRecord& session) override;
    std::vector<SessionRecord> load_sessions() override;
    std::vector<ClientRecord> load_clients() override;

    const std::string& path() const { return path_; }

private:
    void exec(const char* sql);

    std::string path_;
    sqlite3* db_ = nullptr;
    std::mutex mu_;
};

/// Per-client totals as exported by `gateway stats --json`.
struct StoredClientTotals {
    std::string ip;
    std::string identifier;
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
    std::uint64_t session_count = 0;
};

std::vector<StoredClientTotals> aggregate_store(SessionStore& store);

} // namespace gateway
