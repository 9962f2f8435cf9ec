fn main() {
    std::process::exit(reef_lora::cli::run_cli(std::env::args_os()));
}
