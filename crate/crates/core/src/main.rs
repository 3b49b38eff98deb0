fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNISREC_LOG", "warn")).init();
    std::process::exit(unisrec::cli::run(std::env::args_os()));
}
