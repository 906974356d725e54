fn main() {
    std::process::exit(sigan::cli::main_entry());
}
