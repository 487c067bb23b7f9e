fn main() {
    std::process::exit(subdepth_cli::run(std::env::args_os()));
}
