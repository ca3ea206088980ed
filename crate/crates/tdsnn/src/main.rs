fn main() {
    if let Err(e) = tdsnn::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
