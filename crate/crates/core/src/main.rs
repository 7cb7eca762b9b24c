fn main() {
    std::process::exit(orient_attn::cli::run(std::env::args_os()));
}
