fn main() {
    std::process::exit(ddrmpr::cli::main_with(std::env::args_os()));
}
