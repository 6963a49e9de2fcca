fn main() {
    let env = std::env::vars().collect();
    std::process::exit(scs::cli::run(std::env::args_os(), &env));
}
