#include "fedimit/netproto.hpp"

#include "fedimit/codec.hpp"

#include "json.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <list>
#include <mutex>
#include <thread>

namespace fedimit::netproto {

using json = nlohmann::json;

namespace {

constexpr std::array<std::pair<MsgType, std::string_view>, 6> kTypeNames{{
    {MsgType::UPLOAD_PARAMS, "UPLOAD_PARAMS"},
    {MsgType::UPLOAD_ACK, "UPLOAD_ACK"},
    {MsgType::REQUEST_GUIDE, "REQUEST_GUIDE"},
    {MsgType::GUIDE_RESPONSE, "GUIDE_RESPONSE"},
    {MsgType::NOT_READY, "NOT_READY"},
    {MsgType::ERROR, "ERROR"},
}};

bool carries_payload(MsgType t) { return t == MsgType::UPLOAD_PARAMS || t == MsgType::GUIDE_RESPONSE; }

bool needs_modality(MsgType t) {
    return t == MsgType::UPLOAD_PARAMS || t == MsgType::REQUEST_GUIDE || t == MsgType::GUIDE_RESPONSE;
}

bool agent_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_' ||
           c == '-';
}

std::string printable(std::string_view s) {
    std::string out;
    out.reserve(std::min<std::size_t>(s.size(), 512));
    for (char c : s.substr(0, 512)) out.push_back(c >= 0x20 && c < 0x7f ? c : '?');
    return out;
}

std::uint32_t read_be32(std::string_view b) {
    return (std::uint32_t{static_cast<unsigned char>(b[0])} << 24) |
           (std::uint32_t{static_cast<unsigned char>(b[1])} << 16) |
           (std::uint32_t{static_cast<unsigned char>(b[2])} << 8) | std::uint32_t{static_cast<unsigned char>(b[3])};
}

}  // namespace

std::string_view to_string(MsgType t) {
    for (const auto& [k, name] : kTypeNames)
        if (k == t) return name;
    throw InvalidEnvelope("unknown message type");
}

MsgType msg_type_from_string(std::string_view s) {
    for (const auto& [k, name] : kTypeNames)
        if (name == s) return k;
    throw InvalidEnvelope("unknown message type '" + printable(s) + "'");
}

void validate(const Envelope& e) {
    if (e.protocol_version != kProtocolVersion) throw VersionMismatch("unsupported protocol version");
    if (e.agent_id.empty() || e.agent_id.size() > 128 || !std::all_of(e.agent_id.begin(), e.agent_id.end(), agent_char))
        throw InvalidEnvelope("agent_id must be 1..128 characters of [A-Za-z0-9._-]");
    if (carries_payload(e.msg_type) == e.payload.empty())
        throw InvalidEnvelope(std::string(to_string(e.msg_type)) +
                              (e.payload.empty() ? " requires a payload" : " must not carry a payload"));
    if (needs_modality(e.msg_type) && !e.modality)
        throw InvalidEnvelope(std::string(to_string(e.msg_type)) + " requires a modality");
    if (!std::all_of(e.detail.begin(), e.detail.end(), [](char c) { return c >= 0x20 && c < 0x7f; }))
        throw InvalidEnvelope("detail must be printable ASCII");
}

std::string encode(const Envelope& e) {
    validate(e);
    const auto payload = codec::base64_encode(
        std::span(reinterpret_cast<const unsigned char*>(e.payload.data()), e.payload.size()));
    json j = {{"msg_type", to_string(e.msg_type)},
              {"protocol_version", e.protocol_version},
              {"agent_id", e.agent_id},
              {"payload", payload},
              {"request_id", e.request_id},
              {"version", e.version},
              {"detail", e.detail}};
    if (e.modality) j["modality"] = env::to_string(*e.modality);
    const std::string body = j.dump();
    if (body.size() > kMaxFrameBytes) throw FrameTooLarge("envelope exceeds the frame cap");
    std::string out(4, '\0');
    const auto n = static_cast<std::uint32_t>(body.size());
    out[0] = static_cast<char>(n >> 24);
    out[1] = static_cast<char>(n >> 16);
    out[2] = static_cast<char>(n >> 8);
    out[3] = static_cast<char>(n);
    out += body;
    return out;
}

Envelope decode(std::string_view frame) {
    if (frame.size() < 4) throw TruncatedFrame("frame shorter than its length prefix");
    const std::uint32_t n = read_be32(frame);
    if (n > kMaxFrameBytes) throw FrameTooLarge("declared length " + std::to_string(n) + " exceeds the 64 MiB cap");
    if (frame.size() - 4 < n)
        throw TruncatedFrame("declared length " + std::to_string(n) + ", got " + std::to_string(frame.size() - 4));
    if (frame.size() - 4 > n) throw DecodeError("trailing bytes after the frame");

    json j;
    try {
        j = json::parse(frame.substr(4));
    } catch (const json::exception&) {
        throw DecodeError("frame body is not valid JSON");
    }
    if (!j.is_object()) throw DecodeError("frame body is not a JSON object");
    const auto pv = j.find("protocol_version");
    if (pv == j.end() || !pv->is_number_integer()) throw InvalidEnvelope("missing protocol_version");
    if (pv->get<std::int64_t>() != kProtocolVersion)
        throw VersionMismatch("unsupported protocol version " + std::to_string(pv->get<std::int64_t>()));

    static const std::array<std::string_view, 8> known{"msg_type", "protocol_version", "agent_id", "payload",
                                                       "request_id", "version", "detail", "modality"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end()) throw InvalidEnvelope("unknown field '" + printable(k) + "'");

    auto field = [&](const char* key, bool (json::*is)() const noexcept) -> const json& {
        const auto it = j.find(key);
        if (it == j.end()) throw InvalidEnvelope(std::string("missing field '") + key + "'");
        if (!((*it).*is)()) throw InvalidEnvelope(std::string("field '") + key + "' has the wrong type");
        return *it;
    };

    Envelope e;
    e.msg_type = msg_type_from_string(field("msg_type", &json::is_string).get<std::string>());
    e.protocol_version = kProtocolVersion;
    e.agent_id = field("agent_id", &json::is_string).get<std::string>();
    e.request_id = field("request_id", &json::is_number_unsigned).get<std::uint64_t>();
    e.version = field("version", &json::is_number_unsigned).get<std::uint64_t>();
    e.detail = field("detail", &json::is_string).get<std::string>();
    const auto bytes = codec::base64_decode(field("payload", &json::is_string).get<std::string>());
    e.payload.assign(bytes.begin(), bytes.end());
    if (const auto m = j.find("modality"); m != j.end()) {
        if (!m->is_string()) throw InvalidEnvelope("field 'modality' has the wrong type");
        try {
            e.modality = env::modality_from_string(m->get<std::string>());
        } catch (const Error&) {
            throw InvalidEnvelope("unknown modality");
        }
    }
    validate(e);
    return e;
}

std::optional<std::string> FrameBuffer::next() {
    if (buf_.size() < 4) return std::nullopt;
    const std::uint32_t n = read_be32(buf_);
    if (n > kMaxFrameBytes) throw FrameTooLarge("declared length " + std::to_string(n) + " exceeds the 64 MiB cap");
    if (buf_.size() - 4 < n) return std::nullopt;
    std::string frame = buf_.substr(0, 4 + std::size_t{n});
    buf_.erase(0, 4 + std::size_t{n});
    return frame;
}

namespace {

Envelope reply_to(const Envelope& req, MsgType type) {
    Envelope r;
    r.msg_type = type;
    r.agent_id = "cloud";
    r.request_id = req.request_id;
    r.modality = req.modality;
    return r;
}

Envelope error_reply(std::uint64_t request_id, std::string_view detail) {
    Envelope r;
    r.msg_type = MsgType::ERROR;
    r.agent_id = "cloud";
    r.request_id = request_id;
    r.detail = printable(detail);
    return r;
}

}  // namespace

Envelope handle(fusion::Cloud& cloud, const Envelope& request, const ServerOptions& options, bool& fuse_after) {
    fuse_after = false;
    try {
        switch (request.msg_type) {
            case MsgType::UPLOAD_PARAMS: {
                Envelope r = reply_to(request, MsgType::UPLOAD_ACK);
                r.version = cloud.upload(request.agent_id, *request.modality, request.payload);
                fuse_after = options.auto_fuse && cloud.fresh_upload_set();
                return r;
            }
            case MsgType::REQUEST_GUIDE: {
                try {
                    const auto s = cloud.handle_service_request(*request.modality);
                    Envelope r = reply_to(request, MsgType::GUIDE_RESPONSE);
                    r.payload = s.bytes;
                    r.version = s.version;
                    return r;
                } catch (const NotReady& e) {
                    Envelope r = reply_to(request, MsgType::NOT_READY);
                    r.detail = printable(e.what());
                    return r;
                }
            }
            default:
                return error_reply(request.request_id,
                                   std::string("unexpected message type ") + std::string(to_string(request.msg_type)));
        }
    } catch (const Error& e) {
        return error_reply(request.request_id, e.what());
    }
}

Handled handle_frame(fusion::Cloud& cloud, std::string_view frame, const ServerOptions& options) {
    Handled out;
    Envelope req;
    try {
        req = decode(frame);
    } catch (const Error& e) {
        out.reply = encode(error_reply(0, std::string("bad frame: ") + e.what()));
        return out;
    }
    out.reply = encode(handle(cloud, req, options, out.fuse_after));
    return out;
}

std::vector<std::string> InProcessTransport::deliver(std::string_view bytes) {
    std::vector<std::string> replies;
    buffer_.append(bytes);
    while (true) {
        std::optional<std::string> frame;
        try {
            frame = buffer_.next();
        } catch (const FrameTooLarge& e) {
            buffer_.clear();
            replies.push_back(encode(error_reply(0, std::string("bad frame: ") + e.what())));
            break;
        }
        if (!frame) break;
        auto h = handle_frame(cloud_, *frame, options_);
        replies.push_back(std::move(h.reply));
        if (h.fuse_after) cloud_.run_fusion_round();
    }
    return replies;
}

Envelope InProcessTransport::request(const Envelope& e) {
    auto replies = deliver(encode(e));
    if (replies.size() != 1) throw ProtocolError("expected exactly one reply frame");
    return decode(replies.front());
}

namespace {

struct Fd {
    int fd = -1;
    explicit Fd(int f = -1) : fd(f) {}
    ~Fd() { reset(); }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    Fd(Fd&& o) noexcept : fd(std::exchange(o.fd, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd = std::exchange(o.fd, -1);
        }
        return *this;
    }
    void reset() {
        if (fd >= 0) ::close(fd);
        fd = -1;
    }
};

sockaddr_in parse_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) throw ConnectionError("address must be host:port, got '" + address + "'");
    std::string host = address.substr(0, colon);
    const std::string port_text = address.substr(colon + 1);
    char* end = nullptr;
    const long port = std::strtol(port_text.c_str(), &end, 10);
    if (port_text.empty() || *end != '\0' || port < 0 || port > 65535)
        throw ConnectionError("bad port in '" + address + "'");
    if (host.empty() || host == "localhost") host = "127.0.0.1";
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1)
        throw ConnectionError("bad IPv4 host in '" + address + "'");
    return sa;
}

using Clock = std::chrono::steady_clock;

int remaining_ms(Clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return static_cast<int>(std::max<long long>(0, left));
}

void send_all(int fd, std::string_view data, Clock::time_point deadline) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        pollfd p{fd, POLLOUT, 0};
        const int r = ::poll(&p, 1, remaining_ms(deadline));
        if (r == 0) throw TimeoutError("send timed out");
        if (r < 0) {
            if (errno == EINTR) continue;
            throw ConnectionError(std::string("poll: ") + std::strerror(errno));
        }
        const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw ConnectionError(std::string("send: ") + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
}

}  // namespace

Envelope SocketTransport::request(const Envelope& e) {
    const std::string frame = encode(e);
    const auto deadline = Clock::now() + timeout_;
    const sockaddr_in sa = parse_address(address_);
    Fd s(::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
    if (s.fd < 0) throw ConnectionError(std::string("socket: ") + std::strerror(errno));
    if (::connect(s.fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) < 0) {
        if (errno != EINPROGRESS) throw ConnectionError("connect to " + address_ + ": " + std::strerror(errno));
        pollfd p{s.fd, POLLOUT, 0};
        const int r = ::poll(&p, 1, remaining_ms(deadline));
        if (r == 0) throw TimeoutError("connect to " + address_ + " timed out");
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(s.fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (r < 0 || err != 0) throw ConnectionError("connect to " + address_ + ": " + std::strerror(err ? err : errno));
    }
    send_all(s.fd, frame, deadline);

    FrameBuffer in;
    char buf[65536];
    while (true) {
        if (auto f = in.next()) return decode(*f);
        pollfd p{s.fd, POLLIN, 0};
        const int r = ::poll(&p, 1, remaining_ms(deadline));
        if (r == 0) throw TimeoutError("no reply from " + address_ + " within the timeout");
        if (r < 0) {
            if (errno == EINTR) continue;
            throw ConnectionError(std::string("poll: ") + std::strerror(errno));
        }
        const ssize_t n = ::recv(s.fd, buf, sizeof buf, 0);
        if (n == 0) throw ConnectionError("server closed the connection before replying");
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw ConnectionError(std::string("recv: ") + std::strerror(errno));
        }
        in.append(std::string_view(buf, static_cast<std::size_t>(n)));
    }
}

struct Server::Impl {
    fusion::Cloud& cloud;
    ServerOptions options;
    Fd listener;
    std::atomic<bool> stopping{false};
    std::thread acceptor;
    std::mutex conns_mutex;
    struct Conn {
        std::thread thread;
        std::shared_ptr<std::atomic<bool>> done;
    };
    std::list<Conn> conns;
    std::mutex wait_mutex;
    std::condition_variable wait_cv;
    bool stopped = false;

    Impl(fusion::Cloud& c, ServerOptions o) : cloud(c), options(o) {}

    void serve_connection(int raw, const std::shared_ptr<std::atomic<bool>>& done) {
        Fd s(raw);
        FrameBuffer in;
        char buf[65536];
        const auto reply_deadline = [] { return Clock::now() + kDefaultTimeout; };
        auto last_activity = Clock::now();
        try {
            while (true) {
                pollfd p{s.fd, POLLIN, 0};
                const int r = ::poll(&p, 1, 100);
                if (r < 0 && errno != EINTR) break;
                if (r <= 0) {
                    // On shutdown, finish a half-received frame unless the peer stalls.
                    if (stopping && (in.empty() || Clock::now() - last_activity > kDefaultTimeout)) break;
                    continue;
                }
                const ssize_t n = ::recv(s.fd, buf, sizeof buf, 0);
                if (n == 0) break;
                if (n < 0) {
                    if (errno == EINTR || errno == EAGAIN) continue;
                    break;
                }
                last_activity = Clock::now();
                in.append(std::string_view(buf, static_cast<std::size_t>(n)));
                while (true) {
                    std::optional<std::string> frame;
                    try {
                        frame = in.next();
                    } catch (const FrameTooLarge& e) {
                        in.clear();
                        send_all(s.fd, encode(error_reply(0, std::string("bad frame: ") + e.what())), reply_deadline());
                        break;
                    }
                    if (!frame) break;
                    auto h = handle_frame(cloud, *frame, options);
                    send_all(s.fd, h.reply, reply_deadline());
                    if (h.fuse_after) {
                        try {
                            cloud.run_fusion_round();
                        } catch (const Error&) {
                        }
                    }
                }
            }
        } catch (const Error&) {
        }
        *done = true;
    }

    void reap(bool all) {
        std::lock_guard lock(conns_mutex);
        for (auto it = conns.begin(); it != conns.end();) {
            if (all || *it->done) {
                it->thread.join();
                it = conns.erase(it);
            } else {
                ++it;
            }
        }
    }

    void accept_loop() {
        while (!stopping) {
            pollfd p{listener.fd, POLLIN, 0};
            const int r = ::poll(&p, 1, 100);
            reap(false);
            if (r <= 0) continue;
            const int c = ::accept4(listener.fd, nullptr, nullptr, SOCK_CLOEXEC);
            if (c < 0) continue;
            int one = 1;
            ::setsockopt(c, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            auto done = std::make_shared<std::atomic<bool>>(false);
            std::lock_guard lock(conns_mutex);
            conns.push_back({std::thread([this, c, done] { serve_connection(c, done); }), done});
        }
    }
};

Server::Server(fusion::Cloud& cloud, const std::string& bind, ServerOptions options)
    : impl_(std::make_unique<Impl>(cloud, options)) {
    sockaddr_in sa = parse_address(bind);
    impl_->listener = Fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (impl_->listener.fd < 0) throw ConnectionError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(impl_->listener.fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(impl_->listener.fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) < 0)
        throw ConnectionError("bind " + bind + ": " + std::strerror(errno));
    if (::listen(impl_->listener.fd, 64) < 0) throw ConnectionError(std::string("listen: ") + std::strerror(errno));
    socklen_t len = sizeof sa;
    ::getsockname(impl_->listener.fd, reinterpret_cast<sockaddr*>(&sa), &len);
    char host[INET_ADDRSTRLEN];
    ::inet_ntop(AF_INET, &sa.sin_addr, host, sizeof host);
    address_ = std::string(host) + ":" + std::to_string(ntohs(sa.sin_port));
    impl_->acceptor = std::thread([this] { impl_->accept_loop(); });
}

Server::~Server() { stop(); }

void Server::stop() {
    if (!impl_ || impl_->stopping.exchange(true)) return;
    impl_->acceptor.join();
    impl_->listener.reset();
    impl_->reap(true);
    {
        std::lock_guard lock(impl_->wait_mutex);
        impl_->stopped = true;
    }
    impl_->wait_cv.notify_all();
}

void Server::wait() {
    std::unique_lock lock(impl_->wait_mutex);
    impl_->wait_cv.wait(lock, [this] { return impl_->stopped; });
}

std::unique_ptr<Server> serve_cloud(const std::string& bind, fusion::Cloud& cloud, ServerOptions options) {
    return std::make_unique<Server>(cloud, bind, options);
}

std::string resolve_bind(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* v = std::getenv("FEDIMIT_BIND"); v && *v) return v;
    return kDefaultBind;
}

std::uint64_t next_request_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

namespace {

Envelope checked_request(Transport& transport, const Envelope& req) {
    Envelope reply = transport.request(req);
    if (reply.request_id != req.request_id)
        throw ProtocolError("reply request_id " + std::to_string(reply.request_id) + " does not echo " +
                            std::to_string(req.request_id));
    if (reply.msg_type == MsgType::ERROR) throw ProtocolError("cloud error: " + reply.detail);
    return reply;
}

std::uint64_t upload_bytes(Transport& transport, const std::string& agent_id, env::ModalityId modality,
                           const std::string& bytes) {
    Envelope req;
    req.msg_type = MsgType::UPLOAD_PARAMS;
    req.agent_id = agent_id;
    req.modality = modality;
    req.payload = bytes;
    req.request_id = next_request_id();
    const Envelope reply = checked_request(transport, req);
    if (reply.msg_type != MsgType::UPLOAD_ACK) throw ProtocolError("expected UPLOAD_ACK");
    return reply.version;
}

}  // namespace

std::uint64_t client_upload(Transport& transport, const std::string& agent_id, env::ModalityId modality,
                            const nn::ParameterSet& params) {
    return upload_bytes(transport, agent_id, modality, nn::serialize_params(params));
}

std::uint64_t client_upload(const std::string& address, const std::string& agent_id, env::ModalityId modality,
                            const nn::ParameterSet& params, std::chrono::milliseconds timeout) {
    SocketTransport t(address, timeout);
    return client_upload(t, agent_id, modality, params);
}

std::optional<fusion::ServiceResponse> client_request_guide(Transport& transport, env::ModalityId modality,
                                                            const std::string& agent_id) {
    Envelope req;
    req.msg_type = MsgType::REQUEST_GUIDE;
    req.agent_id = agent_id;
    req.modality = modality;
    req.request_id = next_request_id();
    const Envelope reply = checked_request(transport, req);
    if (reply.msg_type == MsgType::NOT_READY) return std::nullopt;
    if (reply.msg_type != MsgType::GUIDE_RESPONSE) throw ProtocolError("expected GUIDE_RESPONSE");
    return fusion::ServiceResponse{reply.payload, reply.version};
}

std::optional<fusion::ServiceResponse> client_request_guide(const std::string& address, env::ModalityId modality,
                                                            std::chrono::milliseconds timeout) {
    SocketTransport t(address, timeout);
    return client_request_guide(t, modality);
}

std::uint64_t TransportLink::upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) {
    return upload_bytes(transport_, agent_id, modality, bytes);
}

std::optional<fusion::ServiceResponse> TransportLink::request_guide(env::ModalityId modality) {
    return client_request_guide(transport_, modality);
}

}  // namespace fedimit::netproto
