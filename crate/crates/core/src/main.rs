fn main() {
    let code = instmix::cli::run(std::env::args_os());
    std::process::exit(code);
}
