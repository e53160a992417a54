fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or(hpmn::cli::LOG_ENV, "info")).init();
    std::process::exit(hpmn::cli::run(std::env::args_os()));
}
