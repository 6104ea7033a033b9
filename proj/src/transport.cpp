#include "splitshield/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <cstring>
#include <future>

namespace splitshield {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

// Blocking exact-length I/O; false on EOF/error.
bool read_exact(int fd, void* buf, std::size_t n) {
    auto* p = static_cast<std::uint8_t*>(buf);
    while (n > 0) {
        const ssize_t r = ::read(fd, p, n);
        if (r <= 0) {
            if (r < 0 && errno == EINTR) continue;
            return false;
        }
        p += r;
        n -= static_cast<std::size_t>(r);
    }
    return true;
}

bool write_all(int fd, const void* buf, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(buf);
    while (n > 0) {
        const ssize_t r = ::write(fd, p, n);
        if (r <= 0) {
            if (r < 0 && errno == EINTR) continue;
            return false;
        }
        p += r;
        n -= static_cast<std::size_t>(r);
    }
    return true;
}

constexpr std::size_t kHeaderBytes = 4 + 1 + 1 + 4;

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame& f) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'S', 'S', 'C', 'I'});
    out.push_back(kFrameVersion);
    out.push_back(static_cast<std::uint8_t>(f.type));
    put_u32(out, static_cast<std::uint32_t>(f.tensors.size()));
    for (const auto& t : f.tensors) {
        if (t.ndim() > 255) throw FrameError(kErrMalformed, "frame: too many dimensions");
        out.push_back(static_cast<std::uint8_t>(t.ndim()));
        for (std::size_t d : t.shape) {
            if (d > UINT32_MAX) throw FrameError(kErrMalformed, "frame: dimension too large");
            put_u32(out, static_cast<std::uint32_t>(d));
        }
        const std::size_t base = out.size();
        out.resize(base + t.numel() * 4);
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const std::uint32_t bits = std::bit_cast<std::uint32_t>(t.data[i]);
            out[base + 4 * i + 0] = static_cast<std::uint8_t>(bits);
            out[base + 4 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
            out[base + 4 * i + 2] = static_cast<std::uint8_t>(bits >> 16);
            out[base + 4 * i + 3] = static_cast<std::uint8_t>(bits >> 24);
        }
    }
    if (f.type == MsgType::LogitsSet || f.type == MsgType::Ack) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(f.server_seconds);
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    } else if (f.type == MsgType::Error) {
        put_u32(out, f.error_code);
    }
    if (out.size() > kMaxFrameBytes) throw FrameError(kErrOversize, "frame: exceeds 256 MiB");
    return out;
}

namespace {

struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw FrameError(kErrMalformed, "frame: truncated");
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::uint32_t u32() {
        need(4);
        const std::uint32_t v = get_u32(buf.data() + pos);
        pos += 4;
        return v;
    }
};

Frame decode_frame_body(ByteReader& r, MsgType type, std::uint32_t tensor_count) {
    Frame f;
    f.type = type;
    std::size_t budget = kMaxFrameBytes;
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const std::uint8_t ndim = r.u8();
        Tensor t;
        t.shape.resize(ndim);
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            t.shape[d] = r.u32();
            if (t.shape[d] != 0 && numel > kMaxFrameBytes / t.shape[d])
                throw FrameError(kErrOversize, "frame: tensor too large");
            numel *= t.shape[d];
        }
        if (ndim == 0) numel = 0;
        if (numel * 4 > budget) throw FrameError(kErrOversize, "frame: exceeds 256 MiB");
        budget -= numel * 4;
        r.need(numel * 4);
        t.data.resize(numel);
        for (std::size_t v = 0; v < numel; ++v)
            t.data[v] = std::bit_cast<float>(get_u32(r.buf.data() + r.pos + 4 * v));
        r.pos += numel * 4;
        f.tensors.push_back(std::move(t));
    }
    if (type == MsgType::LogitsSet || type == MsgType::Ack) {
        r.need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(r.buf[r.pos + i]) << (8 * i);
        r.pos += 8;
        f.server_seconds = std::bit_cast<double>(bits);
    } else if (type == MsgType::Error) {
        f.error_code = r.u32();
    }
    return f;
}

}  // namespace

Frame decode_frame(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() > kMaxFrameBytes) throw FrameError(kErrOversize, "frame: exceeds 256 MiB");
    ByteReader r{bytes};
    r.need(kHeaderBytes);
    if (std::memcmp(bytes.data(), "SSCI", 4) != 0)
        throw FrameError(kErrBadMagic, "frame: bad magic");
    r.pos = 4;
    if (r.u8() != kFrameVersion) throw FrameError(kErrBadVersion, "frame: bad version");
    const std::uint8_t type_raw = r.u8();
    if (type_raw > static_cast<std::uint8_t>(MsgType::Error))
        throw FrameError(kErrBadType, "frame: bad message type");
    const std::uint32_t count = r.u32();
    Frame f = decode_frame_body(r, static_cast<MsgType>(type_raw), count);
    if (r.pos != bytes.size()) throw FrameError(kErrMalformed, "frame: trailing bytes");
    return f;
}

// ---------------------------------------------------------------------------
// Socket-level framing

namespace {

// Reads one frame from the socket. Returns false on clean EOF. A bad magic
// with an otherwise well-formed frame is reported via FrameError(kErrBadMagic)
// after the frame has been drained, so the stream stays in sync.
bool read_frame_fd(int fd, Frame& out) {
    std::uint8_t header[kHeaderBytes];
    if (!read_exact(fd, header, kHeaderBytes)) return false;
    const bool magic_ok = std::memcmp(header, "SSCI", 4) == 0;
    const std::uint8_t version = header[4];
    const std::uint8_t type_raw = header[5];
    const std::uint32_t count = get_u32(header + 6);

    if (version != kFrameVersion) throw FrameError(kErrBadVersion, "frame: bad version");
    if (type_raw > static_cast<std::uint8_t>(MsgType::Error))
        throw FrameError(kErrBadType, "frame: bad message type");

    // Stream the declared structure even under a bad magic so the connection
    // can survive; size limits still apply.
    Frame f;
    f.type = static_cast<MsgType>(type_raw);
    std::size_t budget = kMaxFrameBytes;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint8_t ndim = 0;
        if (!read_exact(fd, &ndim, 1)) throw FrameError(kErrMalformed, "frame: truncated");
        Tensor t;
        t.shape.resize(ndim);
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            std::uint8_t dim_raw[4];
            if (!read_exact(fd, dim_raw, 4)) throw FrameError(kErrMalformed, "frame: truncated");
            t.shape[d] = get_u32(dim_raw);
            if (t.shape[d] != 0 && numel > kMaxFrameBytes / t.shape[d])
                throw FrameError(kErrOversize, "frame: tensor too large");
            numel *= t.shape[d];
        }
        if (ndim == 0) numel = 0;
        if (numel * 4 > budget) throw FrameError(kErrOversize, "frame: exceeds 256 MiB");
        budget -= numel * 4;
        std::vector<std::uint8_t> raw(numel * 4);
        if (!read_exact(fd, raw.data(), raw.size()))
            throw FrameError(kErrMalformed, "frame: truncated payload");
        t.data.resize(numel);
        for (std::size_t v = 0; v < numel; ++v)
            t.data[v] = std::bit_cast<float>(get_u32(raw.data() + 4 * v));
        f.tensors.push_back(std::move(t));
    }
    if (f.type == MsgType::LogitsSet || f.type == MsgType::Ack) {
        std::uint8_t raw[8];
        if (!read_exact(fd, raw, 8)) throw FrameError(kErrMalformed, "frame: truncated");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(raw[i]) << (8 * i);
        f.server_seconds = std::bit_cast<double>(bits);
    } else if (f.type == MsgType::Error) {
        std::uint8_t raw[4];
        if (!read_exact(fd, raw, 4)) throw FrameError(kErrMalformed, "frame: truncated");
        f.error_code = get_u32(raw);
    }
    if (!magic_ok) throw FrameError(kErrBadMagic, "frame: bad magic");
    out = std::move(f);
    return true;
}

bool send_frame_fd(int fd, const Frame& f) {
    const auto bytes = encode_frame(f);
    return write_all(fd, bytes.data(), bytes.size());
}

int connect_to(const std::string& host, std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error("transport: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw std::runtime_error("transport: bad host " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd);
        throw std::runtime_error("transport: connection refused at " + host + ":" +
                                 std::to_string(port));
    }
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return fd;
}

}  // namespace

InferenceServer::InferenceServer(std::vector<ModelGraph> bodies, ServerOptions opts)
    : bodies_(std::move(bodies)), opts_(opts) {
    if (bodies_.empty()) throw std::invalid_argument("server: needs at least one body");
}

InferenceServer::~InferenceServer() { stop(); }

void InferenceServer::start(const std::string& host, std::uint16_t port) {
    if (running_) throw std::logic_error("server: already running");
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("server: socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        throw std::runtime_error("server: bad host " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listen_fd_, 8) != 0) {
        ::close(listen_fd_);
        throw std::runtime_error("server: cannot bind " + host + ":" + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    host_ = host;
    running_ = true;
    thread_ = std::thread([this] { serve_loop(); });
}

void InferenceServer::stop() {
    if (!running_) return;
    running_ = false;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (thread_.joinable()) thread_.join();
    listen_fd_ = -1;
}

void InferenceServer::serve_loop() {
    while (running_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (!running_) break;
            continue;
        }
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        handle_connection(fd);
        ::close(fd);
    }
}

void InferenceServer::handle_connection(int fd) {
    while (running_) {
        Frame request;
        try {
            if (!read_frame_fd(fd, request)) return;  // clean EOF
        } catch (const FrameError& e) {
            Frame err;
            err.type = MsgType::Error;
            err.error_code = e.code;
            send_frame_fd(fd, err);
            if (e.code == kErrBadMagic) continue;  // stream still in sync
            return;                                // cannot trust the stream
        }
        if (request.type == MsgType::Ack) {
            Frame reply;
            reply.type = MsgType::Ack;
            reply.server_seconds = 0.0;
            if (!send_frame_fd(fd, reply)) return;
            continue;
        }
        if (request.type != MsgType::Features || request.tensors.size() != 1) {
            Frame err;
            err.type = MsgType::Error;
            err.error_code = kErrMalformed;
            if (!send_frame_fd(fd, err)) return;
            continue;
        }

        Frame reply;
        reply.type = MsgType::LogitsSet;
        const auto t0 = Clock::now();
        try {
            if (opts_.parallel_bodies && bodies_.size() > 1) {
                std::vector<std::future<Tensor>> futures;
                futures.reserve(bodies_.size());
                for (const auto& body : bodies_)
                    futures.push_back(std::async(std::launch::async, [&body, &request] {
                        return forward(body, request.tensors[0]);
                    }));
                for (auto& f : futures) reply.tensors.push_back(f.get());
            } else {
                for (const auto& body : bodies_)
                    reply.tensors.push_back(forward(body, request.tensors[0]));
            }
        } catch (const std::exception&) {
            Frame err;
            err.type = MsgType::Error;
            err.error_code = kErrMalformed;
            if (!send_frame_fd(fd, err)) return;
            continue;
        }
        reply.server_seconds = seconds_since(t0);
        if (!send_frame_fd(fd, reply)) return;
    }
}

ClientResult client_infer(const ModelGraph& head, const ModelGraph& tail, const SelectorKey& key,
                          const NoiseSpec& noise, const std::string& host, std::uint16_t port,
                          const Tensor& x) {
    const auto t_total = Clock::now();

    auto t_client = Clock::now();
    Tensor u = forward(head, x);
    const Tensor z = noise.sigma != 0.0f ? add_broadcast_sample(u, noise.tensor) : u;
    double client_s = seconds_since(t_client);

    const int fd = connect_to(host, port);
    Frame request;
    request.type = MsgType::Features;
    request.tensors.push_back(z);
    Frame reply;
    bool got_reply = false;
    if (send_frame_fd(fd, request)) got_reply = read_frame_fd(fd, reply);
    ::close(fd);
    if (!got_reply) throw std::runtime_error("client: no reply from server");
    if (reply.type == MsgType::Error)
        throw std::runtime_error("client: server error code " +
                                 std::to_string(reply.error_code));
    if (reply.type != MsgType::LogitsSet)
        throw std::runtime_error("client: unexpected reply type");

    t_client = Clock::now();
    Tensor combined = selector_combine(reply.tensors, key);
    Tensor logits = forward(tail, combined);
    client_s += seconds_since(t_client);

    ClientResult out;
    out.logits = std::move(logits);
    out.latency.total_s = seconds_since(t_total);
    out.latency.client_s = client_s;
    out.latency.server_s = reply.server_seconds;
    out.latency.comm_s = out.latency.total_s - client_s - reply.server_seconds;
    return out;
}

void ping_server(const std::string& host, std::uint16_t port) {
    const int fd = connect_to(host, port);
    Frame ping;
    ping.type = MsgType::Ack;
    Frame reply;
    bool ok = send_frame_fd(fd, ping) && read_frame_fd(fd, reply);
    ::close(fd);
    if (!ok || reply.type != MsgType::Ack)
        throw std::runtime_error("transport: ping failed at " + host + ":" +
                                 std::to_string(port));
}

}  // namespace splitshield
