#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <memory>
#include <mutex>
#include <thread>

#include "spes/protocol.hpp"

namespace spes {

namespace {

void set_recv_timeout(int fd, int timeout_ms) {
    timeval tv{};
    tv.tv_sec = timeout_ms / 1000;
    tv.tv_usec = (timeout_ms % 1000) * 1000;
    setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

// Returns false on orderly EOF at a frame boundary.
bool read_exact(int fd, uint8_t* buf, size_t n, bool eof_ok) {
    size_t got = 0;
    while (got < n) {
        ssize_t r = ::read(fd, buf + got, n - got);
        if (r == 0) {
            if (got == 0 && eof_ok) return false;
            throw ProtocolError(ProtoError::Truncated, "connection closed mid-frame");
        }
        if (r < 0) {
            if (errno == EINTR) continue;
            if (errno == EAGAIN || errno == EWOULDBLOCK)
                throw ProtocolError(ProtoError::Timeout, "socket read timed out");
            throw std::runtime_error(std::string("socket read failed: ") + std::strerror(errno));
        }
        got += static_cast<size_t>(r);
    }
    return true;
}

void write_all(int fd, const std::vector<uint8_t>& bytes) {
    size_t sent = 0;
    while (sent < bytes.size()) {
        ssize_t w = ::write(fd, bytes.data() + sent, bytes.size() - sent);
        if (w < 0) {
            if (errno == EINTR) continue;
            throw std::runtime_error(std::string("socket write failed: ") + std::strerror(errno));
        }
        sent += static_cast<size_t>(w);
    }
}

// Reads one full frame (18-byte header + payload). False on clean EOF.
bool read_frame(int fd, std::vector<uint8_t>& out) {
    uint8_t header[kHeaderBytes];
    if (!read_exact(fd, header, kHeaderBytes, true)) return false;
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(header[10 + i]) << (8 * i);
    if (len > (1ull << 36))
        throw ProtocolError(ProtoError::MalformedPayload, "implausible frame length");
    out.assign(header, header + kHeaderBytes);
    out.resize(kHeaderBytes + len);
    if (len > 0) read_exact(fd, out.data() + kHeaderBytes, len, false);
    return true;
}

struct FdCloser {
    int fd = -1;
    ~FdCloser() {
        if (fd >= 0) ::close(fd);
    }
};

}  // namespace

RunResult run_socket(const SyncConfig& config, const ModelParams& init,
                     const Worker::Options& worker_opts,
                     const std::function<BatchProvider(int)>& batches_for_node, uint16_t port,
                     int timeout_ms) {
    Server server(config, init);
    std::vector<std::unique_ptr<Worker>> workers;
    for (int n = 0; n < config.nodes; ++n)
        workers.push_back(std::make_unique<Worker>(config, n, worker_opts, batches_for_node(n)));

    FdCloser listener{::socket(AF_INET, SOCK_STREAM, 0)};
    if (listener.fd < 0) throw std::runtime_error("cannot create listening socket");
    int one = 1;
    setsockopt(listener.fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listener.fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
        throw std::runtime_error(std::string("bind failed: ") + std::strerror(errno));
    if (::listen(listener.fd, config.nodes) < 0)
        throw std::runtime_error("listen failed");
    socklen_t alen = sizeof(addr);
    getsockname(listener.fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    uint16_t actual_port = ntohs(addr.sin_port);

    std::mutex server_mu;
    std::vector<int> conn_fd(static_cast<size_t>(config.nodes), -1);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(2 * config.nodes));
    std::mutex err_mu;

    auto record_error = [&](size_t slot) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!errors[slot]) errors[slot] = std::current_exception();
    };

    // Accept all connections up front, then one handler thread per connection.
    std::vector<FdCloser> accepted(static_cast<size_t>(config.nodes));

    // Worker threads connect while we accept.
    for (int n = 0; n < config.nodes; ++n) {
        threads.emplace_back([&, n] {
            try {
                FdCloser fd{::socket(AF_INET, SOCK_STREAM, 0)};
                if (fd.fd < 0) throw std::runtime_error("worker socket failed");
                sockaddr_in peer{};
                peer.sin_family = AF_INET;
                peer.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
                peer.sin_port = htons(actual_port);
                if (::connect(fd.fd, reinterpret_cast<sockaddr*>(&peer), sizeof(peer)) < 0)
                    throw std::runtime_error(std::string("connect failed: ") +
                                             std::strerror(errno));
                set_recv_timeout(fd.fd, timeout_ms);
                Worker& w = *workers[static_cast<size_t>(n)];
                write_all(fd.fd, w.hello());
                std::vector<uint8_t> frame;
                while (!w.finished()) {
                    if (!read_frame(fd.fd, frame))
                        throw ProtocolError(ProtoError::Truncated,
                                            "server closed connection early");
                    for (const auto& reply : w.on_bytes(frame)) write_all(fd.fd, reply);
                }
            } catch (...) {
                record_error(static_cast<size_t>(config.nodes + n));
            }
        });
    }

    for (int c = 0; c < config.nodes; ++c) {
        int fd = ::accept(listener.fd, nullptr, nullptr);
        if (fd < 0) throw std::runtime_error("accept failed");
        set_recv_timeout(fd, timeout_ms);
        accepted[static_cast<size_t>(c)].fd = fd;
        conn_fd[static_cast<size_t>(c)] = fd;
    }

    for (int c = 0; c < config.nodes; ++c) {
        threads.emplace_back([&, c] {
            try {
                std::vector<uint8_t> frame;
                int fd = conn_fd[static_cast<size_t>(c)];
                while (read_frame(fd, frame)) {
                    std::lock_guard<std::mutex> lk(server_mu);
                    for (const auto& o : server.on_bytes(c, frame))
                        write_all(conn_fd[static_cast<size_t>(o.conn)], o.bytes);
                    if (server.finished()) break;
                }
            } catch (...) {
                record_error(static_cast<size_t>(c));
            }
        });
    }

    for (auto& t : threads) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    if (!server.finished())
        throw ProtocolError(ProtoError::BarrierViolation, "socket run ended incomplete");

    std::vector<Worker*> ptrs;
    for (auto& w : workers) ptrs.push_back(w.get());
    return assemble_run_result(server, ptrs);
}

}  // namespace spes
