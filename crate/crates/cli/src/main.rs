fn main() {
    std::process::exit(mfclear_cli::run(std::env::args_os()));
}
