fn main() {
    std::process::exit(prompt_kit_cli::run(std::env::args_os()));
}
