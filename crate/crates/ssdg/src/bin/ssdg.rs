fn main() {
    env_logger::init();
    std::process::exit(ssdg::cli::run(std::env::args()));
}
