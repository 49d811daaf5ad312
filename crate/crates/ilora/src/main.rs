fn main() {
    std::process::exit(ilora::cli::main_entry());
}
