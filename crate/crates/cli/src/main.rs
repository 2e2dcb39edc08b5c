fn main() {
    std::process::exit(leanet_cli::dispatch(std::env::args_os()));
}
