// fedimit: command line front end for the federated imitation pipeline.

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/fusion.hpp"
#include "fedimit/netproto.hpp"
#include "fedimit/pipeline.hpp"

#include "CLI11.hpp"

#include <csignal>
#include <iostream>
#include <optional>
#include <pthread.h>

namespace {

using namespace fedimit;

struct Common {
    std::string config;
    std::string out;
    bool force = false;
    std::size_t threads = 0;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "experiment config (JSON); the default profile when omitted");
    sub->add_option("--out", c.out, "output directory (overrides the config)");
    sub->add_flag("--force", c.force, "redo the stage even when its stamp is current");
    sub->add_option("--threads", c.threads, "worker threads (overrides the config)");
}

pipeline::ExperimentConfig resolve(const Common& c) {
    auto cfg = c.config.empty() ? pipeline::default_config(0) : pipeline::load_config(c.config);
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (c.threads) cfg.threads = c.threads;
    cfg.validate();
    return cfg;
}

int serve(const Common& c, const std::string& bind_flag) {
    const auto cfg = resolve(c);
    // Block the signals before any thread starts so only sigwait sees them.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    std::cerr << "[building cloud corpus]\n";
    auto cloud = pipeline::make_cloud(cfg, cfg.threads);
    auto server = netproto::serve_cloud(netproto::resolve_bind(bind_flag), *cloud, {.auto_fuse = true});
    std::cout << "listening on " << server->address() << std::endl;
    int sig = 0;
    sigwait(&set, &sig);
    std::cerr << "[shutting down]\n";
    server->stop();
    server->wait();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated imitation learning pipeline"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-config", "write the default config for a global seed");
    gen->add_option("--seed", seed, "global seed");
    gen->add_option("--out", gen_out, "file to write (stdout when omitted)");

    Common common;
    std::string bind;
    std::vector<std::pair<CLI::App*, std::optional<pipeline::Stage>>> stage_cmds;
    auto stage_cmd = [&](const char* name, const char* help, std::optional<pipeline::Stage> stage) {
        auto* sub = app.add_subcommand(name, help);
        add_common(sub, common);
        stage_cmds.emplace_back(sub, stage);
        return sub;
    };
    stage_cmd("collect", "roll out the expert and write demonstration sets", pipeline::Stage::collect);
    stage_cmd("train-local", "behavioral cloning for every agent", pipeline::Stage::train_local);
    stage_cmd("fuse", "upload local models, fuse labels, train guide models", pipeline::Stage::fuse);
    stage_cmd("transfer", "fine-tune guides on local data against a scratch baseline", pipeline::Stage::transfer);
    stage_cmd("evaluate", "closed-loop evaluation of all controllers", pipeline::Stage::evaluate);
    stage_cmd("plot", "render curves and metric bars to SVG", pipeline::Stage::plot);
    stage_cmd("run-all", "every stage in order", std::nullopt);
    auto* srv = app.add_subcommand("serve", "run the cloud as a network service");
    add_common(srv, common);
    srv->add_option("--bind", bind, "host:port (default $FEDIMIT_BIND or 127.0.0.1:7878)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            auto cfg = pipeline::default_config(seed);
            const auto text = pipeline::config_to_json(cfg);
            if (gen_out.empty())
                std::cout << text;
            else
                codec::write_file(gen_out, text);
            return 0;
        }
        if (srv->parsed()) return serve(common, bind);
        for (const auto& [sub, stage] : stage_cmds) {
            if (!sub->parsed()) continue;
            const auto cfg = resolve(common);
            pipeline::StageOptions opts{common.force, cfg.threads, &std::cerr};
            if (stage)
                pipeline::run_stage(*stage, cfg, opts);
            else
                pipeline::run_all(cfg, opts);
            std::cerr << "[config hash " << cfg.hash() << "]\n";
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}
