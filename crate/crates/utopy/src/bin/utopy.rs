fn main() {
    std::process::exit(utopy::cli::main_entry());
}
