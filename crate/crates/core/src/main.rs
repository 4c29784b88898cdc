fn main() {
    std::process::exit(nid_core::cli::main_entry());
}
