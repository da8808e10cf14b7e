fn main() {
    let code = sslseg::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
