#include "doctest.h"
#include "support.hpp"

#include "fedimit/error.hpp"
#include "fedimit/netproto.hpp"
#include "fedimit/rng.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdlib>
#include <thread>

using namespace fedimit;
using namespace fedimit::netproto;
using env::ModalityId;

namespace {

std::string be32(std::uint32_t n) {
    return {static_cast<char>(n >> 24), static_cast<char>(n >> 16), static_cast<char>(n >> 8), static_cast<char>(n)};
}

std::string frame_of(const std::string& body) { return be32(static_cast<std::uint32_t>(body.size())) + body; }

Envelope env_of(MsgType t, std::string agent, std::optional<ModalityId> m, std::string payload, std::uint64_t rid,
                std::uint64_t version = 0, std::string detail = "") {
    Envelope e;
    e.msg_type = t;
    e.agent_id = std::move(agent);
    e.modality = m;
    e.payload = std::move(payload);
    e.request_id = rid;
    e.version = version;
    e.detail = std::move(detail);
    return e;
}

fusion::Cloud make_cloud() {
    const std::uint64_t seeds[] = {800};
    std::map<ModalityId, fusion::GuideTraining> training;
    for (auto m : env::kAllModalities) {
        imitation::TrainConfig c;
        c.epochs = 1;
        training.emplace(m, fusion::GuideTraining{nn::default_spec(env::modality_dim(m)), c});
    }
    return fusion::Cloud(fusion::build_cloud_dataset(seeds, 20, 6.0), training);
}

nn::ParameterSet params_for(ModalityId m, std::uint64_t seed) {
    return nn::init_params(nn::default_spec(env::modality_dim(m)), seed);
}

}  // namespace

TEST_CASE("golden frames: encode produces the committed bytes") {
    const auto params = testing::fixture("params_1x1.json");
    CHECK(encode(env_of(MsgType::UPLOAD_PARAMS, "agent-ray", ModalityId::ray, params, 7)) ==
          testing::fixture("frame_upload_params.bin"));
    CHECK(encode(env_of(MsgType::UPLOAD_ACK, "cloud", ModalityId::ray, "", 7, 3)) ==
          testing::fixture("frame_upload_ack.bin"));
    CHECK(encode(env_of(MsgType::REQUEST_GUIDE, "agent-sem", ModalityId::sem, "", 42)) ==
          testing::fixture("frame_request_guide.bin"));
    CHECK(encode(env_of(MsgType::GUIDE_RESPONSE, "cloud", ModalityId::grid, params, 42, 2)) ==
          testing::fixture("frame_guide_response.bin"));
    CHECK(encode(env_of(MsgType::NOT_READY, "cloud", ModalityId::sem, "", 9, 0, "no guide yet")) ==
          testing::fixture("frame_not_ready.bin"));
    CHECK(encode(env_of(MsgType::ERROR, "cloud", std::nullopt, "", 0, 0, "bad frame")) ==
          testing::fixture("frame_error.bin"));
}

TEST_CASE("golden frames: decode recovers the envelope") {
    const auto e = decode(testing::fixture("frame_upload_params.bin"));
    CHECK(e == env_of(MsgType::UPLOAD_PARAMS, "agent-ray", ModalityId::ray, testing::fixture("params_1x1.json"), 7));
    CHECK(decode(testing::fixture("frame_error.bin")).detail == "bad frame");
}

TEST_CASE("decode: truncation, oversize, garbage") {
    const auto good = testing::fixture("frame_request_guide.bin");
    CHECK_THROWS_AS(decode(good.substr(0, 3)), TruncatedFrame);
    CHECK_THROWS_AS(decode(good.substr(0, good.size() - 1)), TruncatedFrame);
    CHECK_THROWS_AS(decode(be32(0xFFFFFFFFu) + "{}"), FrameTooLarge);
    CHECK_THROWS_AS(decode(be32(static_cast<std::uint32_t>(kMaxFrameBytes) + 1)), FrameTooLarge);
    CHECK_THROWS_AS(decode(good + "x"), DecodeError);
    CHECK_THROWS_AS(decode(frame_of("not json at all")), DecodeError);
    CHECK_THROWS_AS(decode(frame_of("[1,2,3]")), DecodeError);
}

TEST_CASE("decode: version and envelope invariants") {
    const std::string base =
        R"("agent_id":"a","detail":"","modality":"ray","payload":"","request_id":1,"version":0)";
    CHECK_NOTHROW(decode(frame_of(R"({"msg_type":"REQUEST_GUIDE","protocol_version":1,)" + base + "}")));
    CHECK_THROWS_AS(decode(frame_of(R"({"msg_type":"REQUEST_GUIDE","protocol_version":2,)" + base + "}")),
                    VersionMismatch);
    CHECK_THROWS_AS(decode(frame_of(R"({"msg_type":"SHOUT","protocol_version":1,)" + base + "}")), InvalidEnvelope);
    CHECK_THROWS_AS(decode(frame_of(R"({"msg_type":"REQUEST_GUIDE","protocol_version":1,"extra":1,)" + base + "}")),
                    InvalidEnvelope);
    CHECK_THROWS_AS(decode(frame_of(R"({"msg_type":"REQUEST_GUIDE","protocol_version":"1",)" + base + "}")),
                    DecodeError);
    // Payload must be absent on REQUEST_GUIDE and present on UPLOAD_PARAMS.
    CHECK_THROWS_AS(encode(env_of(MsgType::REQUEST_GUIDE, "a", ModalityId::ray, "xx", 1)), InvalidEnvelope);
    CHECK_THROWS_AS(encode(env_of(MsgType::UPLOAD_PARAMS, "a", ModalityId::ray, "", 1)), InvalidEnvelope);
    CHECK_THROWS_AS(encode(env_of(MsgType::UPLOAD_PARAMS, "a", std::nullopt, "p", 1)), InvalidEnvelope);
    CHECK_THROWS_AS(encode(env_of(MsgType::UPLOAD_ACK, "bad id", ModalityId::ray, "", 1)), InvalidEnvelope);
    CHECK_THROWS_AS(encode(env_of(MsgType::UPLOAD_ACK, "", ModalityId::ray, "", 1)), InvalidEnvelope);
    Envelope old = env_of(MsgType::UPLOAD_ACK, "a", ModalityId::ray, "", 1);
    old.protocol_version = 0;
    CHECK_THROWS_AS(encode(old), VersionMismatch);
}

TEST_CASE("frame buffer: arbitrary splits") {
    const auto a = testing::fixture("frame_upload_params.bin");
    const auto b = testing::fixture("frame_not_ready.bin");
    const std::string stream = a + b + a;
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        FrameBuffer buf;
        std::vector<std::string> out;
        std::size_t pos = 0;
        while (pos < stream.size()) {
            const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng.below(40));
            buf.append(std::string_view(stream).substr(pos, n));
            pos += n;
            while (auto f = buf.next()) out.push_back(*f);
        }
        CHECK(out == std::vector<std::string>{a, b, a});
        CHECK(buf.empty());
    }
    FrameBuffer big;
    big.append(be32(0x7FFFFFFFu));
    CHECK_THROWS_AS(big.next(), FrameTooLarge);
}

TEST_CASE("round trip: 100 random envelopes over both transports") {
    auto cloud = make_cloud();
    // Over a transport, the server-side copy of the envelope is what lands in the registry.
    Rng rng(12);
    auto random_envelope = [&](std::uint64_t rid) {
        const auto m = env::kAllModalities[rng.below(3)];
        const auto p = params_for(m, rng.next_u64());
        return env_of(MsgType::UPLOAD_PARAMS, "agent-" + std::to_string(rng.below(1000)), m, nn::serialize_params(p),
                      rid);
    };
    for (int i = 0; i < 100; ++i) {
        const auto e = random_envelope(static_cast<std::uint64_t>(i) + 1);
        const auto bytes = encode(e);
        CHECK(decode(bytes) == e);
        CHECK(encode(decode(bytes)) == bytes);
    }

    InProcessTransport local(cloud);
    auto server = serve_cloud("127.0.0.1:0", cloud);
    SocketTransport remote(server->address());
    std::map<ModalityId, std::uint64_t> expected;
    for (int i = 0; i < 100; ++i) {
        Transport& t = i % 2 ? static_cast<Transport&>(remote) : static_cast<Transport&>(local);
        const auto e = random_envelope(next_request_id());
        const auto reply = t.request(e);
        CHECK(reply.msg_type == MsgType::UPLOAD_ACK);
        CHECK(reply.request_id == e.request_id);
        CHECK(reply.version == ++expected[*e.modality]);
        const auto stored = cloud.registry().at(*e.modality);
        CHECK(stored.bytes == e.payload);
        CHECK(stored.agent_id == e.agent_id);
    }
    server->stop();
}

TEST_CASE("server handler: not ready, guide after fusion, errors") {
    auto cloud = make_cloud();
    InProcessTransport t(cloud);
    CHECK_FALSE(client_request_guide(t, ModalityId::ray).has_value());
    CHECK_THROWS_AS(client_upload(t, "agent-ray", ModalityId::grid, params_for(ModalityId::ray, 1)), ProtocolError);
    CHECK(client_upload(t, "agent-ray", ModalityId::ray, params_for(ModalityId::ray, 1)) == 1);
    cloud.run_fusion_round();
    const auto g = client_request_guide(t, ModalityId::ray);
    REQUIRE(g.has_value());
    CHECK(g->version == 1);
    CHECK(nn::bit_identical(nn::deserialize_params(g->bytes, nn::default_spec(16)),
                            cloud.guides()->models.at(ModalityId::ray).params));
    // A cloud-to-agent message type sent to the cloud is answered with ERROR.
    const auto r = t.request(env_of(MsgType::UPLOAD_ACK, "x", ModalityId::ray, "", 5));
    CHECK(r.msg_type == MsgType::ERROR);
    CHECK(r.request_id == 5);
}

TEST_CASE("in-process delivery: garbage then a valid frame") {
    auto cloud = make_cloud();
    InProcessTransport t(cloud);
    auto replies = t.deliver(frame_of("garbage!") + testing::fixture("frame_request_guide.bin"));
    REQUIRE(replies.size() == 2);
    CHECK(decode(replies[0]).msg_type == MsgType::ERROR);
    CHECK(decode(replies[0]).request_id == 0);
    CHECK(decode(replies[1]).msg_type == MsgType::NOT_READY);
    CHECK(decode(replies[1]).request_id == 42);

    replies = t.deliver(be32(0xFFFFFFF0u) + "zzzz");
    REQUIRE(replies.size() == 1);
    CHECK(decode(replies[0]).msg_type == MsgType::ERROR);
    replies = t.deliver(testing::fixture("frame_request_guide.bin"));
    REQUIRE(replies.size() == 1);
    CHECK(decode(replies[0]).msg_type == MsgType::NOT_READY);
}

TEST_CASE("socket: garbage on the wire, then service continues") {
    auto cloud = make_cloud();
    auto server = serve_cloud("127.0.0.1:0", cloud);
    const auto colon = server->address().rfind(':');
    const int port = std::stoi(server->address().substr(colon + 1));

    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(static_cast<std::uint16_t>(port));
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0);
    const std::string bytes = frame_of("{{{{") + testing::fixture("frame_request_guide.bin");
    REQUIRE(::send(fd, bytes.data(), bytes.size(), 0) == static_cast<ssize_t>(bytes.size()));
    FrameBuffer buf;
    std::vector<Envelope> got;
    char tmp[4096];
    while (got.size() < 2) {
        const ssize_t n = ::recv(fd, tmp, sizeof tmp, 0);
        REQUIRE(n > 0);
        buf.append({tmp, static_cast<std::size_t>(n)});
        while (auto f = buf.next()) got.push_back(decode(*f));
    }
    ::close(fd);
    CHECK(got[0].msg_type == MsgType::ERROR);
    CHECK(got[1].msg_type == MsgType::NOT_READY);
    CHECK(got[1].request_id == 42);
    server->stop();
}

TEST_CASE("socket: connection refused and timeout") {
    // Bind then close to get a port with no listener.
    auto cloud = make_cloud();
    std::string dead;
    {
        auto s = serve_cloud("127.0.0.1:0", cloud);
        dead = s->address();
        s->stop();
    }
    CHECK_THROWS_AS(client_request_guide(dead, ModalityId::ray, std::chrono::milliseconds(500)), ConnectionError);

    // A listener that never answers.
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0);
    REQUIRE(::listen(fd, 4) == 0);
    socklen_t len = sizeof sa;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    const std::string silent = "127.0.0.1:" + std::to_string(ntohs(sa.sin_port));
    CHECK_THROWS_AS(client_request_guide(silent, ModalityId::ray, std::chrono::milliseconds(300)), TimeoutError);
    ::close(fd);

    CHECK_THROWS_AS(serve_cloud("not-an-address", cloud), ConnectionError);
}

TEST_CASE("socket: concurrent uploads leave a consistent registry") {
    auto cloud = make_cloud();
    auto server = serve_cloud("127.0.0.1:0", cloud);
    constexpr int kThreads = 6, kEach = 8;
    std::vector<std::vector<std::uint64_t>> versions(kThreads);
    std::vector<std::thread> pool;
    for (int i = 0; i < kThreads; ++i)
        pool.emplace_back([&, i] {
            const auto m = env::kAllModalities[static_cast<std::size_t>(i % 3)];
            for (int k = 0; k < kEach; ++k)
                versions[static_cast<std::size_t>(i)].push_back(client_upload(
                    server->address(), "agent-" + std::to_string(i), m, params_for(m, std::uint64_t(i * 100 + k))));
        });
    for (auto& t : pool) t.join();
    server->stop();

    std::map<ModalityId, std::vector<std::uint64_t>> seen;
    for (int i = 0; i < kThreads; ++i) {
        // Each client sees strictly increasing versions.
        for (std::size_t k = 1; k < versions[i].size(); ++k) CHECK(versions[i][k] > versions[i][k - 1]);
        auto& s = seen[env::kAllModalities[static_cast<std::size_t>(i % 3)]];
        s.insert(s.end(), versions[i].begin(), versions[i].end());
    }
    const auto reg = cloud.registry();
    for (auto& [m, v] : seen) {
        std::sort(v.begin(), v.end());
        // Versions 1..N, each handed out once.
        for (std::size_t k = 0; k < v.size(); ++k) CHECK(v[k] == k + 1);
        CHECK(reg.at(m).version == v.size());
        CHECK_NOTHROW(nn::deserialize_params(reg.at(m).bytes, reg.at(m).spec));
    }
}

TEST_CASE("server auto-fusion once every modality has uploaded") {
    auto cloud = make_cloud();
    auto server = serve_cloud("127.0.0.1:0", cloud, {.auto_fuse = true});
    for (auto m : env::kAllModalities) {
        CHECK_FALSE(client_request_guide(server->address(), m).has_value());
        client_upload(server->address(), "agent-" + std::string(env::to_string(m)), m, params_for(m, 3));
    }
    std::optional<fusion::ServiceResponse> g;
    for (int i = 0; i < 200 && !g; ++i) {
        g = client_request_guide(server->address(), ModalityId::sem);
        if (!g) std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    REQUIRE(g.has_value());
    CHECK(g->version == 1);
    server->stop();
}

TEST_CASE("bind address resolution") {
    ::unsetenv("FEDIMIT_BIND");
    CHECK(resolve_bind("") == kDefaultBind);
    ::setenv("FEDIMIT_BIND", "127.0.0.1:9999", 1);
    CHECK(resolve_bind("") == "127.0.0.1:9999");
    CHECK(resolve_bind("0.0.0.0:1") == "0.0.0.0:1");
    ::unsetenv("FEDIMIT_BIND");
}
