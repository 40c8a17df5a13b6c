fn main() {
    std::process::exit(fairprobe::run_cli(std::env::args_os()));
}
