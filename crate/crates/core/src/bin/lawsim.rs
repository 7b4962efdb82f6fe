fn main() {
    env_logger::init();
    std::process::exit(lawsim::cli::dispatch(std::env::args_os()));
}
