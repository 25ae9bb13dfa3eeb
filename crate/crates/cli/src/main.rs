fn main() {
    std::process::exit(mm_monge_cli::run(std::env::args_os()));
}
