fn main() {
    let code = strokeseg::cli::run(std::env::args_os().skip(1));
    std::process::exit(code);
}
